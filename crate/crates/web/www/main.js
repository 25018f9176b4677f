import init, { attentionView, marginalsView, latencyView } from "./pkg/diseg_web.js";

const $ = (id) => document.getElementById(id);

const numbers = (text) =>
  text.split(/[\s,]+/).filter((s) => s.length > 0).map(Number);

function grid(caption, rows, colLabel = (j) => j + 1) {
  const table = document.createElement("table");
  table.className = "grid";
  table.createCaption().textContent = caption;
  const head = table.insertRow();
  head.appendChild(document.createElement("th"));
  rows[0].forEach((_, j) => {
    const th = document.createElement("th");
    th.textContent = colLabel(j);
    head.appendChild(th);
  });
  rows.forEach((row, i) => {
    const tr = table.insertRow();
    const th = document.createElement("th");
    th.textContent = i + 1;
    tr.appendChild(th);
    row.forEach((v) => {
      const td = tr.insertCell();
      td.textContent = v.toFixed(2);
      td.style.background = `rgba(33, 100, 200, ${Math.min(1, Math.max(0, v))})`;
      td.style.color = v > 0.55 ? "#fff" : "#222";
    });
  });
  return table;
}

function show(target, render) {
  const out = $(target);
  out.replaceChildren();
  try {
    render(out);
  } catch (e) {
    const p = document.createElement("p");
    p.className = "error";
    p.textContent = e.message ?? String(e);
    out.appendChild(p);
  }
}

function runAttention() {
  show("att-out", (out) => {
    const v = JSON.parse(attentionView(new Float64Array(numbers($("att-p").value))));
    out.append(
      grid("same-segment probability", v.beta),
      grid("expected attention", v.gamma),
      grid("hard attention (p >= 0.5)", v.hard),
    );
  });
}

function runMarginals() {
  show("dp-out", (out) => {
    const p = new Float64Array(numbers($("dp-p").value));
    const v = JSON.parse(marginalsView(p, Number($("dp-k").value), $("dp-discard").checked));
    out.append(grid("P(frame i in segment k)", v.m, (j) => `k=${j + 1}`));
    const pre = document.createElement("pre");
    pre.textContent = "expected segment index: " + v.expected_index.map((x) => x.toFixed(3)).join(", ");
    out.appendChild(pre);
  });
}

function runLatency() {
  show("lat-out", (out) => {
    const b = new Uint8Array(numbers($("lat-b").value).map((x) => (x ? 1 : 0)));
    const v = JSON.parse(
      latencyView(b, Number($("lat-k").value), Number($("lat-n").value), Number($("lat-ms").value)),
    );
    const lines = v.tau_ms.map((t, i) => `token ${i + 1}: written after ${v.frames_read[i]} frames, at ${t} ms`);
    lines.push(`source duration ${v.duration_ms} ms`);
    if (v.latency) {
      const l = v.latency;
      lines.push(`AL ${l.al.toFixed(1)} ms, AP ${l.ap.toFixed(3)}, CW ${l.cw.toFixed(1)} ms, DAL ${l.dal.toFixed(1)} ms`);
    }
    const pre = document.createElement("pre");
    pre.textContent = lines.join("\n");
    out.appendChild(pre);
  });
}

await init();
$("att-run").addEventListener("click", runAttention);
$("dp-run").addEventListener("click", runMarginals);
$("lat-run").addEventListener("click", runLatency);
runAttention();
runMarginals();
runLatency();
