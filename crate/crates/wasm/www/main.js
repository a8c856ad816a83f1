import init, { quadratic_demo, compare_demo, overlap_demo } from "./pkg/subcurve_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

// Draws series of y values against their index, optionally on a log axis.
function plot(canvas, series, logY) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 40;
  ctx.clearRect(0, 0, w, h);
  const f = (y) => (logY ? Math.log10(Math.max(y, 1e-300)) : y);
  const ys = series.flatMap((s) => s.values.filter(Number.isFinite).map(f));
  if (ys.length === 0) return;
  let lo = Math.min(...ys), hi = Math.max(...ys);
  if (hi === lo) { hi += 1; lo -= 1; }
  const n = Math.max(...series.map((s) => s.values.length)) - 1 || 1;
  const px = (i) => pad + (i / n) * (w - 2 * pad);
  const py = (y) => h - pad - ((f(y) - lo) / (hi - lo)) * (h - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#444";
  ctx.font = "11px sans-serif";
  const tick = (v) => (logY ? `1e${v.toFixed(1)}` : v.toPrecision(3));
  ctx.fillText(tick(hi), 2, pad + 4);
  ctx.fillText(tick(lo), 2, h - pad + 4);
  series.forEach((s, k) => {
    ctx.strokeStyle = COLORS[k % COLORS.length];
    ctx.beginPath();
    s.values.forEach((y, i) => {
      if (!Number.isFinite(y)) return;
      i === 0 ? ctx.moveTo(px(i), py(y)) : ctx.lineTo(px(i), py(y));
    });
    ctx.stroke();
    ctx.fillStyle = ctx.strokeStyle;
    ctx.fillText(s.name, w - pad - 140, pad + 14 + 14 * k);
  });
}

function guarded(infoId, fn) {
  return () => {
    const info = $(infoId);
    info.className = "";
    try {
      fn(info);
    } catch (e) {
      info.className = "err";
      info.textContent = String(e.message ?? e);
    }
  };
}

$("q-run").onclick = guarded("q-info", (info) => {
  const r = JSON.parse(quadratic_demo(8, num("q-scale"), num("q-steps"), 7));
  const last = r.distances[r.distances.length - 1];
  info.textContent = `λmax = ${r.lambda_max.toFixed(3)}, η = ${r.eta.toExponential(3)}, ` +
    `final/initial distance = ${(last / r.distances[0]).toExponential(3)}`;
  plot($("q-plot"), [
    { name: "gradient descent", values: r.distances },
    { name: "closed form", values: r.closed_form },
  ], true);
});

$("c-run").onclick = guarded("c-info", (info) => {
  const r = JSON.parse(compare_demo(num("c-classes"), num("c-eta"), num("c-epochs"), num("c-seed")));
  const describe = (name, c) => c.diverged
    ? `${name}: diverged (${c.diverged})`
    : `${name}: loss ${c.loss.at(-1).toFixed(4)}, accuracy ${(100 * c.accuracy.at(-1)).toFixed(1)}%`;
  info.textContent = `${describe("SGD", r.sgd)}; ${describe("quasi-Newton", r.quasi_newton)}`;
  plot($("c-plot"), [
    { name: "SGD loss", values: r.sgd.loss },
    { name: "quasi-Newton loss", values: r.quasi_newton.loss },
  ], true);
});

$("o-run").onclick = guarded("o-info", (info) => {
  const r = JSON.parse(overlap_demo(num("o-classes"), num("o-epochs"), num("o-seed")));
  info.textContent = `${r.params} parameters; assignment score ${r.score.toFixed(3)} ` +
    `(random directions: ${r.random_cosine.toFixed(3)}); rank of [class gradients | eigenvectors] = ${r.combined_rank}`;
  const table = $("o-table");
  table.innerHTML = "";
  const head = table.insertRow();
  head.insertCell().textContent = "|cos|";
  r.cosines[0].forEach((_, j) => { head.insertCell().textContent = `e${j + 1}`; });
  r.cosines.forEach((row, k) => {
    const tr = table.insertRow();
    tr.insertCell().textContent = `c${k + 1}`;
    row.forEach((v, j) => {
      const td = tr.insertCell();
      td.textContent = v.toFixed(3);
      if (r.assignment[k] === j) td.style.fontWeight = "bold";
    });
  });
});

await init();
$("q-run").click();
