import init, { scene, classify, horizon_auc } from "./pkg/calib_web.js";

const $ = (id) => document.getElementById(id);
const view = $("view");
const ctx = view.getContext("2d");
const colors = ["#999", "#2ca02c", "#1f77b4"];
let current = null;
let drag = null;

function camera() {
  return { pitch: +$("pitch").value, roll: +$("roll").value, fov: +$("fov").value };
}

// Normalized image coordinates span [-1, 1] on both axes.
const toCanvas = ([x, y]) => [((x + 1) / 2) * view.width, ((y + 1) / 2) * view.height];
const toNormalized = (px, py) => [(px / view.width) * 2 - 1, (py / view.height) * 2 - 1];

function segment(a, b, color, width) {
  const [ax, ay] = toCanvas(a);
  const [bx, by] = toCanvas(b);
  ctx.strokeStyle = color;
  ctx.lineWidth = width;
  ctx.beginPath();
  ctx.moveTo(ax, ay);
  ctx.lineTo(bx, by);
  ctx.stroke();
}

function draw() {
  if (!current) return;
  const n = current.size;
  const img = ctx.createImageData(n, n);
  current.pixels.forEach((v, i) => {
    img.data.set([255 - v, 255 - v, 255 - v, 255], 4 * i);
  });
  const tmp = new OffscreenCanvas(n, n);
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, view.width, view.height);
  for (const l of current.lines) segment(l.p1, l.p2, colors[l.class], 2);
  segment(current.horizon[0], current.horizon[1], "#d62728", 2);
  if (drag && drag.end) segment(drag.start, drag.end, "#ff7f0e", 3);
}

function render() {
  for (const out of document.querySelectorAll("output")) out.value = $(out.htmlFor).value;
  const c = camera();
  try {
    current = JSON.parse(scene(c.pitch, c.roll, c.fov, +$("lines").value, +$("seed").value));
    const [p, r] = current.recovered;
    const z = current.zenith.map((v) => v.toFixed(4)).join(", ");
    $("scene-info").textContent =
      `zenith VP (homogeneous): ${z}\nrecovered pitch ${p.toFixed(6)}°, roll ${r.toFixed(6)}°`;
    $("scene-info").classList.remove("error");
  } catch (e) {
    current = null;
    $("scene-info").textContent = String(e);
    $("scene-info").classList.add("error");
  }
  draw();
}

function label() {
  const c = camera();
  const [a, b] = [drag.start, drag.end];
  try {
    const v = JSON.parse(classify(c.pitch, c.roll, c.fov, a[0], a[1], b[0], b[1]));
    const d = v.distances.map((x) => x.toFixed(3) + "°");
    $("label-info").textContent =
      `class: ${v.name}\nangle to zenith ${d[0]}, to horizontal VPs ${d[1]} and ${d[2]} (threshold ${v.threshold.toFixed(1)}°)`;
  } catch (e) {
    $("label-info").textContent = String(e);
  }
}

function auc() {
  const cv = $("curve");
  const g = cv.getContext("2d");
  g.clearRect(0, 0, cv.width, cv.height);
  try {
    const v = JSON.parse(horizon_auc($("errors").value));
    $("auc-info").textContent = v.thresholds
      .map((t, i) => `AUC@${t.toFixed(2)} = ${v.auc[i].toFixed(2)}%`)
      .join("\n");
    $("auc-info").classList.remove("error");
    // Empirical CDF on [0, 0.25].
    const sx = (e) => 30 + (Math.min(e, 0.25) / 0.25) * (cv.width - 40);
    const sy = (f) => cv.height - 20 - f * (cv.height - 30);
    g.strokeStyle = "#888";
    g.strokeRect(30, 10, cv.width - 40, cv.height - 30);
    g.strokeStyle = "#1f77b4";
    g.beginPath();
    g.moveTo(sx(0), sy(0));
    let prev = 0;
    for (const [e, f] of v.curve) {
      if (e > 0.25) break;
      g.lineTo(sx(e), sy(prev));
      g.lineTo(sx(e), sy(f));
      prev = f;
    }
    g.lineTo(sx(0.25), sy(prev));
    g.stroke();
  } catch (e) {
    $("auc-info").textContent = String(e);
    $("auc-info").classList.add("error");
  }
}

function point(ev) {
  const r = view.getBoundingClientRect();
  return toNormalized(((ev.clientX - r.left) / r.width) * view.width, ((ev.clientY - r.top) / r.height) * view.height);
}

await init();
for (const id of ["pitch", "roll", "fov", "lines", "seed"]) $(id).addEventListener("input", render);
$("errors").addEventListener("input", auc);
view.addEventListener("mousedown", (ev) => { drag = { start: point(ev), end: null }; });
view.addEventListener("mousemove", (ev) => {
  if (drag && !drag.done) { drag.end = point(ev); draw(); }
});
view.addEventListener("mouseup", (ev) => {
  if (!drag) return;
  drag.end = point(ev);
  drag.done = true;
  draw();
  label();
});
render();
auc();
