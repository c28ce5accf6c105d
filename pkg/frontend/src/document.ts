// The editor document: shapes plus per-component conditions, serialized to
// the service's layout JSON with a `conditions` extension block. One shape
// and one condition mode per component; text and image are mutually
// exclusive (the decoupling rule), and clearing both means "no condition".

import type { Shape } from "./geometry.js";
import { COMPONENTS, ComponentName } from "./palette.js";

export type ConditionMode = "text" | "image" | "none";

export interface Condition {
  mode: ConditionMode;
  sentence?: string;
  imageData?: string; // base64 PNG
}

export interface EditorDocument {
  canvas: [number, number];
  shapes: Shape[];
  conditions: Partial<Record<ComponentName, Condition>>;
  seed: number;
}

export function emptyDocument(width = 64, height = 96): EditorDocument {
  return { canvas: [width, height], shapes: [], conditions: {}, seed: 0 };
}

export function getShape(doc: EditorDocument, comp: ComponentName): Shape | undefined {
  return doc.shapes.find((s) => s.component === comp);
}

/** Insert or replace the component's shape (one shape per component). */
export function putShape(doc: EditorDocument, shape: Shape): EditorDocument {
  const shapes = doc.shapes.filter((s) => s.component !== shape.component);
  shapes.push(shape);
  return { ...doc, shapes };
}

export function removeShape(doc: EditorDocument, comp: ComponentName): EditorDocument {
  return { ...doc, shapes: doc.shapes.filter((s) => s.component !== comp) };
}

/** Typing a sentence claims text mode and discards any uploaded image. */
export function setText(doc: EditorDocument, comp: ComponentName, sentence: string): EditorDocument {
  const conditions = { ...doc.conditions };
  if (sentence.trim() === "") {
    return clearCondition(doc, comp);
  }
  conditions[comp] = { mode: "text", sentence };
  return { ...doc, conditions };
}

/** Uploading an image claims image mode and discards any sentence. */
export function setImage(doc: EditorDocument, comp: ComponentName, imageData: string): EditorDocument {
  const conditions = { ...doc.conditions };
  conditions[comp] = { mode: "image", imageData };
  return { ...doc, conditions };
}

export function clearCondition(doc: EditorDocument, comp: ComponentName): EditorDocument {
  const conditions = { ...doc.conditions };
  conditions[comp] = { mode: "none" };
  return { ...doc, conditions };
}

function canonicalShape(s: Shape): Record<string, unknown> {
  if (s.kind === "ellipse") {
    return { component: s.component, kind: "ellipse", center: s.center, axes: s.axes };
  }
  return { component: s.component, kind: "rect", center: s.center, size: s.size, theta: s.theta };
}

/** Canonical serialization: fixed key order, shapes in component order, so a
 * round trip is byte-for-byte stable. */
export function serializeDocument(doc: EditorDocument): string {
  const shapes = [...doc.shapes]
    .sort((a, b) => COMPONENTS.indexOf(a.component) - COMPONENTS.indexOf(b.component))
    .map(canonicalShape);
  const conditions: Record<string, Condition> = {};
  for (const comp of COMPONENTS) {
    const cond = doc.conditions[comp];
    if (cond && (cond.mode !== "none")) {
      conditions[comp] = cond.mode === "text"
        ? { mode: "text", sentence: cond.sentence }
        : { mode: "image", imageData: cond.imageData };
    } else if (cond) {
      conditions[comp] = { mode: "none" };
    }
  }
  return JSON.stringify({ canvas: doc.canvas, shapes, conditions, seed: doc.seed });
}

export function deserializeDocument(text: string): EditorDocument {
  const raw = JSON.parse(text);
  if (!Array.isArray(raw.canvas) || raw.canvas.length !== 2) {
    throw new Error("document.canvas must be [W,H]");
  }
  const shapes: Shape[] = [];
  for (const s of raw.shapes ?? []) {
    if (!COMPONENTS.includes(s.component)) {
      throw new Error(`unknown component ${s.component}`);
    }
    if (s.kind === "ellipse") {
      shapes.push({ component: s.component, kind: "ellipse", center: s.center, axes: s.axes });
    } else if (s.kind === "rect") {
      shapes.push({ component: s.component, kind: "rect", center: s.center, size: s.size, theta: s.theta ?? 0 });
    } else {
      throw new Error(`unknown shape kind ${s.kind}`);
    }
  }
  const conditions: Partial<Record<ComponentName, Condition>> = {};
  for (const [comp, cond] of Object.entries(raw.conditions ?? {})) {
    conditions[comp as ComponentName] = cond as Condition;
  }
  return { canvas: [raw.canvas[0], raw.canvas[1]], shapes, conditions, seed: raw.seed ?? 0 };
}

/** The layout part of the export, exactly the service's layout schema. */
export function layoutJson(doc: EditorDocument): Record<string, unknown> {
  const serialized = JSON.parse(serializeDocument(doc));
  return { canvas: serialized.canvas, shapes: serialized.shapes };
}

/** Map the document onto a /v1/generate request body. */
export function toGenerateRequest(doc: EditorDocument, opts?: {
  guidanceScale?: number; useCa?: boolean; steps?: number;
}): Record<string, unknown> {
  const texts: Record<string, string> = {};
  const references: Record<string, string> = {};
  const drop: Record<string, string> = {};
  for (const shape of doc.shapes) {
    const cond = doc.conditions[shape.component];
    if (!cond || cond.mode === "none") {
      drop[shape.component] = "NONE";
    } else if (cond.mode === "text" && cond.sentence) {
      texts[shape.component] = cond.sentence;
      drop[shape.component] = "TEXT";
    } else if (cond.mode === "image" && cond.imageData) {
      references[shape.component] = cond.imageData;
      drop[shape.component] = "IMAGE";
    } else {
      drop[shape.component] = "NONE";
    }
  }
  return {
    layout: layoutJson(doc),
    texts,
    references,
    drop,
    guidance_scale: opts?.guidanceScale ?? 3.0,
    use_ca: opts?.useCa ?? true,
    seed: doc.seed,
    steps: opts?.steps ?? 50,
  };
}

/** Short content hash used to label stale results in the history strip. */
export function documentHash(doc: EditorDocument): string {
  const text = serializeDocument(doc);
  let h = 5381;
  for (let i = 0; i < text.length; i++) {
    h = ((h << 5) + h + text.charCodeAt(i)) | 0;
  }
  return (h >>> 0).toString(16).padStart(8, "0");
}
