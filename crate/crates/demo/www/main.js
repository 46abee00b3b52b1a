import init, { Demo, scene_names } from "./pkg/vlashield_demo.js";

const $ = (id) => document.getElementById(id);
let demo = null;

function draw(canvasId, rgba, caption) {
  const c = $(canvasId);
  c.width = demo.width();
  c.height = demo.height();
  const img = new ImageData(new Uint8ClampedArray(rgba), c.width, c.height);
  c.getContext("2d").putImageData(img, 0, 0);
  if (caption !== undefined) $(`${canvasId}-cap`).textContent = caption;
}

function status(msg) {
  $("status").textContent = msg;
}

function guarded(fn) {
  return () => {
    try {
      fn();
    } catch (e) {
      status(`error: ${e.message ?? e}`);
    }
  };
}

function seed() {
  return BigInt($("seed").value || 0);
}

function load() {
  demo = new Demo($("scene").value, seed());
  $("instruction").textContent = `instruction: "${demo.instruction()}"`;
  draw("left", demo.frame(), "observation");
  draw("right", demo.frame(), "");
  const region = $("region");
  region.replaceChildren(
    ...demo.region_labels().map((label, i) => new Option(label, String(i))),
  );
  $("report").replaceChildren();
  status("");
}

function renderReport(report) {
  const rows = report.entries.map((e) => {
    const tr = document.createElement("tr");
    if (e.sensitive) tr.className = "hit";
    for (const [v, cls] of [
      [e.region, ""],
      [e.kind, ""],
      [e.score.toExponential(2), "num"],
      [e.threshold.toExponential(2), "num"],
      [e.sensitive ? "sensitive" : "", ""],
    ]) {
      const td = document.createElement("td");
      td.textContent = v;
      if (cls) td.className = cls;
      tr.append(td);
    }
    return tr;
  });
  const head = document.createElement("tr");
  for (const h of ["region", "kind", "score", "threshold", ""]) {
    const th = document.createElement("th");
    th.textContent = h;
    head.append(th);
  }
  $("report").replaceChildren(head, ...rows);
}

function probe() {
  const t0 = performance.now();
  const report = JSON.parse(demo.probe($("method").value, seed()));
  const ms = (performance.now() - t0).toFixed(0);
  draw("left", demo.sensitivity_overlay(), "red: flagged, green: left alone");
  draw("right", demo.edited(), "edited observation");
  renderReport(report);
  status(`${report.entries.length} regions, ${report.interventions.length} edited, ${ms} ms`);
}

function gradcam() {
  const f = Number($("fraction").value);
  $("fraction-value").textContent = f.toFixed(2);
  draw("right", demo.gradcam(f), `attribution mask, top ${f.toFixed(2)} of range`);
}

function perturb() {
  const rgba = demo.perturb(
    Number($("region").value),
    Number($("kernel").value),
    Number($("sigma").value),
    seed(),
  );
  const label = $("region").selectedOptions[0].textContent;
  draw("right", rgba, `perturbed: ${label}`);
}

await init();
$("scene").replaceChildren(...scene_names().map((n) => new Option(n, n)));
$("load").onclick = guarded(load);
$("probe").onclick = guarded(probe);
$("fraction").oninput = guarded(gradcam);
$("perturb").onclick = guarded(perturb);
guarded(load)();
