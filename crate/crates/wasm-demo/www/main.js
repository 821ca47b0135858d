import init, { linear_components, scenario_truth, replicate } from "./pkg/medvar_wasm.js";

const LABELS = ["omega0", "omega1", "omega2", "omega3"];
const ORACLE_DRAWS = 100000;

// Grouped bars: one group per component, one bar per series.
function drawBars(canvas, series, colors) {
  const ctx = canvas.getContext("2d");
  const { width, height } = canvas;
  ctx.clearRect(0, 0, width, height);
  const all = series.flat();
  const top = Math.max(1e-12, ...all.map(Math.abs));
  const hasNeg = all.some((v) => v < 0);
  const base = hasNeg ? height / 2 : height - 24;
  const scale = (hasNeg ? height / 2 - 24 : height - 44) / top;
  const group = width / LABELS.length;
  const bar = (group * 0.6) / series.length;
  ctx.font = "13px system-ui";
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(0, base);
  ctx.lineTo(width, base);
  ctx.stroke();
  LABELS.forEach((label, k) => {
    const x0 = k * group + group * 0.2;
    series.forEach((values, s) => {
      const v = values[k];
      const h = v * scale;
      ctx.fillStyle = colors[s];
      ctx.fillRect(x0 + s * bar, base - Math.max(h, 0), bar - 2, Math.abs(h));
      ctx.fillStyle = "#222";
      ctx.fillText(v.toFixed(4), x0 + s * bar, v >= 0 ? base - h - 4 : base - h + 14);
    });
    ctx.fillStyle = "#555";
    ctx.fillText(label, x0, hasNeg ? height - 4 : base + 16);
  });
}

function updateLinear() {
  const [b2, b3, b4] = ["b2", "b3", "b4"].map((id) => {
    const v = parseFloat(document.getElementById(id).value);
    document.getElementById(id + "v").textContent = v.toFixed(2);
    return v;
  });
  drawBars(document.getElementById("linear"), [Array.from(linear_components(b2, b3, b4))], ["#3b6ea5"]);
}

function scenarioInputs() {
  const num = (id) => Number(document.getElementById(id).value);
  return {
    n: num("n"),
    q: num("q"),
    sigma: num("sigma"),
    beta: num("beta"),
    binary: document.getElementById("binary").checked,
    seed: BigInt(num("seed")),
  };
}

// Defers work by a frame so the status line paints first.
function run(message, work) {
  const status = document.getElementById("status");
  status.style.color = "#555";
  status.textContent = message;
  requestAnimationFrame(() =>
    setTimeout(() => {
      try {
        work();
        status.textContent = "";
      } catch (e) {
        status.style.color = "#a00";
        status.textContent = String(e.message || e);
      }
    }, 0),
  );
}

function showTruth() {
  run("Evaluating the true components...", () => {
    const s = scenarioInputs();
    const r = JSON.parse(scenario_truth(s.q, s.sigma, s.beta, s.binary, s.seed, ORACLE_DRAWS));
    drawBars(document.getElementById("scenario"), [r.omega], ["#3b6ea5"]);
  });
}

function showReplication() {
  run("Generating data and fitting models...", () => {
    const s = scenarioInputs();
    const r = JSON.parse(replicate(s.n, s.q, s.sigma, s.beta, s.binary, s.seed, ORACLE_DRAWS));
    drawBars(document.getElementById("scenario"), [r.truth, r.estimate], ["#3b6ea5", "#e08a2c"]);
  });
}

await init();
for (const id of ["b2", "b3", "b4"]) {
  document.getElementById(id).addEventListener("input", updateLinear);
}
document.getElementById("truth").addEventListener("click", showTruth);
document.getElementById("replicate").addEventListener("click", showReplication);
updateLinear();
