import init, { Demo, interpolate, ramp } from "./pkg/facerig_wasm.js";

const $ = (id) => document.getElementById(id);

function fitBox(xs, ys, w, h, pad = 20) {
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  const [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  const s = Math.min((w - 2 * pad) / (x1 - x0 || 1), (h - 2 * pad) / (y1 - y0 || 1));
  return (x, y) => [pad + (x - x0) * s, h - pad - (y - y0) * s];
}

function drawMesh(demo, faces, alpha, frame) {
  const c = $("mesh").getContext("2d");
  const v = demo.mesh(Float64Array.from(alpha));
  c.clearRect(0, 0, 360, 360);
  c.strokeStyle = "#357";
  c.lineWidth = 0.5;
  c.beginPath();
  for (let f = 0; f < faces.length; f += 3) {
    for (let e = 0; e < 3; e++) {
      const [a, b] = [faces[f + e], faces[f + (e + 1) % 3]];
      c.moveTo(...frame(v[3 * a], v[3 * a + 1]));
      c.lineTo(...frame(v[3 * b], v[3 * b + 1]));
    }
  }
  c.stroke();
}

function drawFit(demo) {
  const noise = Number($("noise").value);
  $("noise-v").textContent = noise;
  const r = JSON.parse(demo.fit_noisy(noise, BigInt(Math.floor(Math.random() * 2 ** 31))));
  const xs = r.observed.filter((_, i) => i % 2 === 0);
  const ys = r.observed.filter((_, i) => i % 2 === 1);
  const frame = fitBox(xs, ys, 360, 360);
  const c = $("fit").getContext("2d");
  c.clearRect(0, 0, 360, 360);
  const dots = (pts, color, size) => {
    c.fillStyle = color;
    for (let i = 0; i < pts.length; i += 2) {
      const [x, y] = frame(pts[i], pts[i + 1]);
      c.fillRect(x - size / 2, y - size / 2, size, size);
    }
  };
  dots(r.observed, "#c33", 5);
  dots(r.fitted, "#137", 3);
  $("fit-info").textContent =
    `red: observed, blue: fitted\nresidual ${r.residual.toExponential(3)}\n` +
    `iterations ${r.iterations}\nrotation error ${r.rotation_error.toExponential(2)} rad`;
}

function drawCurve() {
  const n = 20;
  let values;
  let keys = [];
  if ($("use-ramp").checked) {
    values = ramp(Number($("peak").value), n);
  } else {
    keys = $("keys").value.split(",").map(Number).filter((k) => Number.isInteger(k) && k >= 0 && k < n);
    const raw = Array.from({ length: n }, (_, i) => 0.5 + 0.45 * Math.sin(i * 1.3));
    try {
      values = interpolate(Float64Array.from(raw), Uint32Array.from(keys));
    } catch (e) {
      $("status").textContent = e.message;
      return;
    }
  }
  $("status").textContent = "";
  const c = $("curve").getContext("2d");
  c.clearRect(0, 0, 360, 220);
  const x = (i) => 20 + (i * 320) / (n - 1);
  const y = (v) => 200 - v * 180;
  c.strokeStyle = "#357";
  c.beginPath();
  values.forEach((v, i) => (i ? c.lineTo(x(i), y(v)) : c.moveTo(x(i), y(v))));
  c.stroke();
  values.forEach((v, i) => {
    c.fillStyle = keys.includes(i) ? "#c33" : "#357";
    c.beginPath();
    c.arc(x(i), y(v), keys.includes(i) ? 4 : 2, 0, 2 * Math.PI);
    c.fill();
  });
}

async function main() {
  await init();
  const demo = new Demo(7n, 400, 8);
  const faces = demo.faces();
  const names = demo.channels();
  const alpha = new Array(names.length).fill(0);
  const base = demo.mesh(Float64Array.from(alpha));
  const frame = fitBox(base.filter((_, i) => i % 3 === 0), base.filter((_, i) => i % 3 === 1), 360, 360);
  names.forEach((name, k) => {
    const label = document.createElement("label");
    const input = Object.assign(document.createElement("input"), { type: "range", min: 0, max: 1, step: 0.01, value: 0 });
    input.oninput = () => {
      alpha[k] = Number(input.value);
      drawMesh(demo, faces, alpha, frame);
    };
    label.append(input, ` ${name}`);
    $("sliders").append(label);
  });
  drawMesh(demo, faces, alpha, frame);

  $("noise").oninput = () => drawFit(demo);
  $("refit").onclick = () => drawFit(demo);
  drawFit(demo);

  for (const id of ["keys", "peak", "use-ramp"]) $(id).oninput = drawCurve;
  drawCurve();
  $("status").textContent = "";
}

main().catch((e) => ($("status").textContent = String(e)));
