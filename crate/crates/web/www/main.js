import init, { Demo } from "./pkg/kfprune_web.js";

const COLORS = [[230, 97, 1], [94, 60, 153], [27, 158, 119]];
const GRID = 80;
const $ = (id) => document.getElementById(id);
let demo = null;

function drawRegions() {
  const cv = $("regions");
  const ctx = cv.getContext("2d");
  const cls = demo.regions(GRID);
  const img = ctx.createImageData(GRID, GRID);
  for (let i = 0; i < cls.length; i++) {
    const [r, g, b] = COLORS[cls[i]];
    img.data.set([r, g, b, 70], i * 4);
  }
  const off = new OffscreenCanvas(GRID, GRID);
  off.getContext("2d").putImageData(img, 0, 0);
  ctx.clearRect(0, 0, cv.width, cv.height);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, cv.width, cv.height);
  const pts = demo.points();
  for (let i = 0; i < pts.length; i += 3) {
    const [r, g, b] = COLORS[pts[i + 2]];
    ctx.fillStyle = `rgb(${r},${g},${b})`;
    ctx.fillRect(pts[i] * cv.width - 1.5, (1 - pts[i + 1]) * cv.height - 1.5, 3, 3);
  }
}

function drawHistogram() {
  const cv = $("hist");
  const ctx = cv.getContext("2d");
  const h = demo.histogram();
  const counts = h.slice(1);
  const max = Math.max(1, ...counts);
  const w = cv.width / counts.length;
  ctx.clearRect(0, 0, cv.width, cv.height);
  ctx.fillStyle = "#555";
  counts.forEach((c, i) => {
    const bh = (c / max) * (cv.height - 16);
    ctx.fillRect(i * w, cv.height - 14 - bh, w - 1, bh);
  });
  ctx.fillText(`-${h[0].toFixed(2)}`, 2, cv.height - 2);
  ctx.fillText(`${h[0].toFixed(2)}`, cv.width - 30, cv.height - 2);
}

function update() {
  if (!demo) return;
  const s = Number($("sparsity").value);
  $("sparsity-out").value = `${Math.round(s * 100)}%`;
  try {
    const [acc, remaining, mag] = demo.prune(s, Number($("damping").value));
    $("remaining").value = `${remaining} / ${demo.total_params()}`;
    $("acc").value = `${(acc * 100).toFixed(1)}%`;
    $("mag").value = `${(mag * 100).toFixed(1)}%`;
  } catch (e) {
    $("acc").value = String(e);
  }
  drawRegions();
  drawHistogram();
}

function train() {
  $("status").textContent = "training...";
  setTimeout(() => {
    demo?.free();
    demo = new Demo(Number($("seed").value), Number($("hidden").value));
    $("status").textContent = "";
    update();
  }, 10);
}

await init();
$("train").onclick = train;
$("sparsity").oninput = update;
$("damping").onchange = update;
train();
