// Built with: wasm-bindgen --target web --out-dir www/pkg <damtl_web.wasm>
import init, { maskedConv, cmmdDemo, trainingCurve } from "./pkg/damtl_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#1f77b4", "#d62728", "#2ca02c"];

function drawMap(canvas, values, side, signed) {
  const ctx = canvas.getContext("2d");
  const cell = canvas.width / side;
  const max = Math.max(1e-9, ...values.map(Math.abs));
  for (let i = 0; i < values.length; i++) {
    const v = values[i] / max;
    const shade = signed ? Math.round(127.5 + 127.5 * v) : Math.round(255 * Math.max(0, v));
    ctx.fillStyle = `rgb(${shade},${shade},${shade})`;
    ctx.fillRect((i % side) * cell, Math.floor(i / side) * cell, cell, cell);
  }
}

// --- masked convolution ---------------------------------------------------
const keepBoxes = [];
for (let i = 0; i < 9; i++) {
  const box = document.createElement("input");
  box.type = "checkbox";
  box.checked = true;
  box.addEventListener("change", updateMasked);
  $("mc-keep").appendChild(box);
  keepBoxes.push(box);
}

function updateMasked() {
  const mask = Number($("mc-mask").value);
  $("mc-mask-v").textContent = mask.toFixed(2);
  const keep = keepBoxes.reduce((bits, b, i) => bits | (b.checked ? 1 << i : 0), 0);
  const d = JSON.parse(maskedConv(Number($("mc-class").value), mask, keep, Number($("mc-seed").value)));
  drawMap($("mc-in"), d.input, d.side, false);
  drawMap($("mc-out0"), d.output[0], d.out_side, false);
  drawMap($("mc-out1"), d.output[1], d.out_side, false);
  const active = d.output.map((m) => m.filter((v) => v > 0).length);
  $("mc-info").textContent =
    `S = Ψ⊙W (vertical edge): [${d.extracted.slice(0, 9).map((v) => v.toFixed(2)).join(", ")}]; ` +
    `active units per channel: ${active.join(" / ")}`;
}

// --- CMMD -----------------------------------------------------------------
function updateCmmd() {
  const drift = Number($("cm-drift").value);
  const noise = Number($("cm-noise").value);
  $("cm-drift-v").textContent = drift.toFixed(2);
  $("cm-noise-v").textContent = noise.toFixed(2);
  const d = JSON.parse(cmmdDemo(drift, noise, 0));
  const canvas = $("cm-plot");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const sx = (x) => canvas.width / 2 + x * 60;
  const sy = (y) => canvas.height / 2 - y * 60;
  const dot = ([x, y], color, filled, r) => {
    ctx.beginPath();
    ctx.arc(sx(x), sy(y), r, 0, 2 * Math.PI);
    ctx.strokeStyle = ctx.fillStyle = color;
    filled ? ctx.fill() : ctx.stroke();
  };
  d.aux.forEach((p, i) => dot(p, COLORS[d.labels[i]], true, 2.5));
  d.task.forEach((p, i) => dot(p, COLORS[d.labels[i]], false, 3));
  d.aux_means.forEach((m, c) => {
    const t = d.task_means[c];
    ctx.beginPath();
    ctx.moveTo(sx(m[0]), sy(m[1]));
    ctx.lineTo(sx(t[0]), sy(t[1]));
    ctx.strokeStyle = "#000";
    ctx.lineWidth = 2;
    ctx.stroke();
    ctx.lineWidth = 1;
  });
  $("cm-info").textContent =
    `filled: aux-weight stream, hollow: task-weight stream; CMMD = Σ_c ‖μ_aux,c − μ_task,c‖² = ${d.value.toFixed(4)}`;
}

// --- training -------------------------------------------------------------
function plotSeries(canvas, series, yMax) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const pad = 30;
  const n = Math.max(...series.map((s) => s.values.length));
  const x = (i) => pad + (i / Math.max(1, n - 1)) * (canvas.width - 2 * pad);
  const y = (v) => canvas.height - pad - (v / yMax) * (canvas.height - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, canvas.width - 2 * pad, canvas.height - 2 * pad);
  series.forEach((s, k) => {
    ctx.beginPath();
    s.values.forEach((v, i) => (i ? ctx.lineTo(x(i), y(v)) : ctx.moveTo(x(i), y(v))));
    ctx.strokeStyle = s.color;
    ctx.stroke();
    ctx.fillStyle = s.color;
    ctx.fillText(s.label, pad + 6, pad + 14 + 14 * k);
  });
}

function runTraining() {
  $("tr-info").textContent = "training…";
  // let the status paint before the synchronous call
  setTimeout(() => {
    try {
      const t0 = performance.now();
      const d = JSON.parse(
        trainingCurve(Number($("tr-l1").value), Number($("tr-l2").value), Number($("tr-epochs").value), Number($("tr-seed").value)),
      );
      const objMax = Math.max(...d.objective);
      plotSeries($("tr-plot"), [
        { label: "objective (scaled)", values: d.objective.map((v) => v / objMax), color: "#000" },
        { label: "T1 test acc", values: d.test_accuracy[0], color: COLORS[0] },
        { label: "T2 test acc", values: d.test_accuracy[1], color: COLORS[1] },
      ], 1);
      const last = (a) => a[a.length - 1].toFixed(3);
      $("tr-info").textContent =
        `aux train acc ${d.aux_train_accuracy.toFixed(3)}; final test acc ${last(d.test_accuracy[0])} / ${last(d.test_accuracy[1])}; ` +
        `mask density ${d.mask_density.map((v) => v.toFixed(3)).join(" / ")}; ${(performance.now() - t0).toFixed(0)} ms`;
    } catch (e) {
      $("tr-info").textContent = `error: ${e}`;
    }
  }, 10);
}

await init();
$("status").textContent = "";
for (const id of ["mc-class", "mc-mask", "mc-seed"]) $(id).addEventListener("input", updateMasked);
for (const id of ["cm-drift", "cm-noise"]) $(id).addEventListener("input", updateCmmd);
$("tr-run").addEventListener("click", runTraining);
updateMasked();
updateCmmd();
