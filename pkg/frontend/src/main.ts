// DOM wiring: palette sidebar, condition panel, generate flow, history strip,
// import/export. One in-flight generation at a time; editing stays live and
// results are labeled with the document hash they came from.

import { Client, ApiError } from "./api.js";
import {
  EditorDocument,
  clearCondition,
  documentHash,
  emptyDocument,
  deserializeDocument,
  removeShape,
  serializeDocument,
  setImage,
  setText,
  toGenerateRequest,
} from "./document.js";
import { Editor } from "./editor.js";
import { COMPONENTS, ComponentName, cssColor } from "./palette.js";

const client = new Client("");
let doc: EditorDocument = emptyDocument();
let busy = false;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

const canvas = el<HTMLCanvasElement>("editor-canvas");
const editor = new Editor(canvas, doc, {
  onDocumentChanged(next) {
    doc = next;
    refreshConditions();
  },
  confirmReplace(component) {
    return window.confirm(`Replace the existing ${component} shape?`);
  },
});

function banner(message: string, kind: "error" | "info" = "error"): void {
  const box = el<HTMLDivElement>("banner");
  box.textContent = message;
  box.className = message ? `banner ${kind}` : "banner hidden";
  if (!message) box.classList.add("hidden");
}

function refreshEditor(): void {
  editor.setDocument(doc);
  refreshConditions();
}

// --- sidebar ---------------------------------------------------------------

function buildSidebar(): void {
  const list = el<HTMLDivElement>("component-list");
  list.innerHTML = "";
  for (const comp of COMPONENTS) {
    const row = document.createElement("button");
    row.className = "component-row";
    row.dataset.component = comp;
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    swatch.style.background = cssColor(comp);
    row.append(swatch, document.createTextNode(comp));
    row.addEventListener("click", () => {
      editor.selected = comp;
      document.querySelectorAll(".component-row").forEach((r) =>
        r.classList.toggle("active", (r as HTMLElement).dataset.component === comp));
      editor.render();
    });
    list.append(row);
  }
  (list.firstChild as HTMLElement)?.classList.add("active");
  editor.selected = COMPONENTS[0];
  el<HTMLSelectElement>("shape-kind").addEventListener("change", (e) => {
    editor.shapeKind = (e.target as HTMLSelectElement).value as "ellipse" | "rect";
  });
  el<HTMLButtonElement>("delete-shape").addEventListener("click", () => {
    doc = removeShape(doc, editor.selected);
    refreshEditor();
  });
}

// --- conditions ------------------------------------------------------------

function refreshConditions(): void {
  const panel = el<HTMLDivElement>("conditions");
  panel.innerHTML = "";
  for (const shape of doc.shapes) {
    panel.append(conditionRow(shape.component));
  }
}

function conditionRow(comp: ComponentName): HTMLElement {
  const cond = doc.conditions[comp] ?? { mode: "none" as const };
  const row = document.createElement("div");
  row.className = "condition-row";
  const label = document.createElement("span");
  label.textContent = comp;
  label.style.color = cssColor(comp);

  const text = document.createElement("input");
  text.type = "text";
  text.placeholder = "sentence, e.g. a scarlet short-sleeve tee top";
  text.value = cond.mode === "text" ? cond.sentence ?? "" : "";
  text.disabled = cond.mode === "image";
  text.addEventListener("change", () => {
    doc = setText(doc, comp, text.value);
    refreshConditions();
  });

  const file = document.createElement("input");
  file.type = "file";
  file.accept = "image/png";
  file.addEventListener("change", async () => {
    const chosen = file.files?.[0];
    if (!chosen) return;
    const data = await chosen.arrayBuffer();
    let binary = "";
    new Uint8Array(data).forEach((b) => { binary += String.fromCharCode(b); });
    doc = setImage(doc, comp, btoa(binary));
    refreshConditions();
  });

  const status = document.createElement("span");
  status.className = "mode-tag";
  status.textContent = cond.mode;

  const clear = document.createElement("button");
  clear.textContent = "clear";
  clear.addEventListener("click", () => {
    doc = clearCondition(doc, comp);
    refreshConditions();
  });

  row.append(label, text, file, status, clear);
  return row;
}

// --- generation ------------------------------------------------------------

async function runGenerate(): Promise<void> {
  if (busy) return;
  busy = true;
  banner("");
  const button = el<HTMLButtonElement>("generate");
  button.disabled = true;
  const hash = documentHash(doc);
  try {
    const result = await client.generate(toGenerateRequest(doc, {
      guidanceScale: parseFloat(el<HTMLInputElement>("guidance").value),
      useCa: el<HTMLInputElement>("use-ca").checked,
      steps: parseInt(el<HTMLInputElement>("steps").value, 10),
    }));
    const img = el<HTMLImageElement>("result-image");
    img.src = `data:image/png;base64,${result.image}`;
    el<HTMLSpanElement>("result-meta").textContent =
      `seed ${result.seed} · drop ${JSON.stringify(result.drop)} · doc ${hash}` +
      (hash !== documentHash(doc) ? " (stale)" : "");
    pushHistory(result.image, result.seed, hash);
  } catch (e) {
    if (e instanceof ApiError) {
      banner(e.status === 0 ? "Server unreachable — is `layoutdoll serve` running?"
                            : `Generation failed (${e.status}): ${e.detail}`);
    } else {
      banner(String(e));
    }
  } finally {
    busy = false;
    button.disabled = false;
  }
}

function pushHistory(imageB64: string, seed: number, hash: string): void {
  const strip = el<HTMLDivElement>("history");
  const item = document.createElement("figure");
  const img = document.createElement("img");
  img.src = `data:image/png;base64,${imageB64}`;
  const cap = document.createElement("figcaption");
  cap.textContent = `s${seed} · ${hash.slice(0, 6)}`;
  item.append(img, cap);
  strip.prepend(item);
  while (strip.childElementCount > 12) strip.lastChild?.remove();
}

// --- import / export -------------------------------------------------------

function exportDocument(): void {
  const blob = new Blob([serializeDocument(doc)], { type: "application/json" });
  const a = document.createElement("a");
  a.href = URL.createObjectURL(blob);
  a.download = "layout-document.json";
  a.click();
  URL.revokeObjectURL(a.href);
}

async function importDocument(file: File): Promise<void> {
  try {
    doc = deserializeDocument(await file.text());
    refreshEditor();
    banner("document loaded", "info");
  } catch (e) {
    banner(`import failed: ${e}`);
  }
}

// --- boot ------------------------------------------------------------------

buildSidebar();
refreshConditions();
el<HTMLButtonElement>("generate").addEventListener("click", () => void runGenerate());
el<HTMLButtonElement>("reroll").addEventListener("click", () => {
  doc = { ...doc, seed: doc.seed + 1 };
  el<HTMLInputElement>("seed").value = String(doc.seed);
  void runGenerate();
});
el<HTMLInputElement>("seed").addEventListener("change", (e) => {
  doc = { ...doc, seed: parseInt((e.target as HTMLInputElement).value, 10) || 0 };
});
el<HTMLButtonElement>("export").addEventListener("click", exportDocument);
el<HTMLInputElement>("import").addEventListener("change", (e) => {
  const file = (e.target as HTMLInputElement).files?.[0];
  if (file) void importDocument(file);
});

client.health().then(
  (h) => banner(h.checkpoint_id === "none"
    ? "Service is up but no checkpoint is loaded; generation will fail."
    : `Connected · checkpoint ${h.checkpoint_id}`, "info"),
  () => banner("Service unreachable; start it with `layoutdoll serve --checkpoint ...`"),
);
