// Canvas engine: renders the document like the server's rasterizer (white
// background, flat component colors, fixed z-order) at an integer zoom, and
// turns pointer gestures into shape edits.

import {
  Shape,
  handlePositions,
  pointInShape,
  resized,
  rotatedTowards,
  shapeFromDrag,
  translated,
} from "./geometry.js";
import { EditorDocument, getShape, putShape } from "./document.js";
import { ComponentName, cssColor, zIndex } from "./palette.js";

type DragState =
  | { kind: "none" }
  | { kind: "create"; x0: number; y0: number; x1: number; y1: number }
  | { kind: "move"; last: [number, number] }
  | { kind: "resize" }
  | { kind: "rotate" };

export interface EditorCallbacks {
  onDocumentChanged(doc: EditorDocument): void;
  confirmReplace(component: ComponentName): boolean;
}

export class Editor {
  private ctx: CanvasRenderingContext2D;
  private drag: DragState = { kind: "none" };
  doc: EditorDocument;
  selected: ComponentName = "top";
  shapeKind: "ellipse" | "rect" = "rect";
  readonly zoom: number;

  constructor(private canvas: HTMLCanvasElement, doc: EditorDocument,
              private callbacks: EditorCallbacks, zoom = 5) {
    this.doc = doc;
    this.zoom = zoom;
    const ctx = canvas.getContext("2d");
    if (!ctx) throw new Error("2d canvas context unavailable");
    this.ctx = ctx;
    canvas.width = doc.canvas[0] * zoom;
    canvas.height = doc.canvas[1] * zoom;
    canvas.addEventListener("pointerdown", (e) => this.onDown(e));
    canvas.addEventListener("pointermove", (e) => this.onMove(e));
    canvas.addEventListener("pointerup", (e) => this.onUp(e));
    this.render();
  }

  setDocument(doc: EditorDocument): void {
    this.doc = doc;
    this.render();
  }

  private toCanvasCoords(e: PointerEvent): [number, number] {
    const rect = this.canvas.getBoundingClientRect();
    return [
      (e.clientX - rect.left) * (this.canvas.width / rect.width) / this.zoom,
      (e.clientY - rect.top) * (this.canvas.height / rect.height) / this.zoom,
    ];
  }

  private onDown(e: PointerEvent): void {
    this.canvas.setPointerCapture(e.pointerId);
    const [x, y] = this.toCanvasCoords(e);
    const shape = getShape(this.doc, this.selected);
    if (shape) {
      for (const handle of handlePositions(shape)) {
        if (Math.hypot(handle.x - x, handle.y - y) <= 2.5) {
          this.drag = { kind: handle.role === "rotate" ? "rotate" : "resize" };
          return;
        }
      }
      if (pointInShape(shape, x, y)) {
        this.drag = { kind: "move", last: [x, y] };
        return;
      }
      if (!this.callbacks.confirmReplace(this.selected)) {
        this.drag = { kind: "none" };
        return;
      }
    }
    this.drag = { kind: "create", x0: x, y0: y, x1: x, y1: y };
  }

  private onMove(e: PointerEvent): void {
    if (this.drag.kind === "none") return;
    const [x, y] = this.toCanvasCoords(e);
    const shape = getShape(this.doc, this.selected);
    if (this.drag.kind === "create") {
      this.drag.x1 = x;
      this.drag.y1 = y;
      this.render();
      this.previewCreate();
      return;
    }
    if (!shape) return;
    let next: Shape;
    if (this.drag.kind === "move") {
      next = translated(shape, x - this.drag.last[0], y - this.drag.last[1]);
      this.drag.last = [x, y];
    } else if (this.drag.kind === "resize") {
      next = resized(shape, x, y);
    } else {
      next = rotatedTowards(shape, x, y);
    }
    this.doc = putShape(this.doc, next);
    this.render();
  }

  private onUp(e: PointerEvent): void {
    if (this.drag.kind === "create") {
      const { x0, y0, x1, y1 } = this.drag;
      if (Math.abs(x1 - x0) >= 2 && Math.abs(y1 - y0) >= 2) {
        this.doc = putShape(this.doc,
          shapeFromDrag(this.selected, this.shapeKind, x0, y0, x1, y1));
      }
    }
    if (this.drag.kind !== "none") {
      this.callbacks.onDocumentChanged(this.doc);
    }
    this.drag = { kind: "none" };
    this.render();
    this.canvas.releasePointerCapture(e.pointerId);
  }

  private previewCreate(): void {
    if (this.drag.kind !== "create") return;
    const { x0, y0, x1, y1 } = this.drag;
    const z = this.zoom;
    this.ctx.save();
    this.ctx.strokeStyle = cssColor(this.selected);
    this.ctx.setLineDash([4, 3]);
    this.ctx.strokeRect(Math.min(x0, x1) * z, Math.min(y0, y1) * z,
                        Math.abs(x1 - x0) * z, Math.abs(y1 - y0) * z);
    this.ctx.restore();
  }

  render(): void {
    const z = this.zoom;
    const ctx = this.ctx;
    ctx.fillStyle = "#ffffff";
    ctx.fillRect(0, 0, this.canvas.width, this.canvas.height);
    const ordered = [...this.doc.shapes].sort(
      (a, b) => zIndex(a.component) - zIndex(b.component));
    for (const shape of ordered) {
      ctx.fillStyle = cssColor(shape.component);
      ctx.save();
      ctx.translate(shape.center[0] * z, shape.center[1] * z);
      if (shape.kind === "ellipse") {
        ctx.beginPath();
        ctx.ellipse(0, 0, shape.axes[0] * z, shape.axes[1] * z, 0, 0, 2 * Math.PI);
        ctx.fill();
      } else {
        ctx.rotate(shape.theta);
        ctx.fillRect(-shape.size[0] * z / 2, -shape.size[1] * z / 2,
                     shape.size[0] * z, shape.size[1] * z);
      }
      ctx.restore();
    }
    const selectedShape = getShape(this.doc, this.selected);
    if (selectedShape) {
      ctx.strokeStyle = "#222";
      for (const handle of handlePositions(selectedShape)) {
        ctx.strokeRect(handle.x * z - 3, handle.y * z - 3, 6, 6);
      }
    }
  }
}
