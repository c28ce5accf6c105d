// Shape math shared by the canvas tools and the document model.

import type { ComponentName } from "./palette.js";

export interface EllipseShape {
  component: ComponentName;
  kind: "ellipse";
  center: [number, number];
  axes: [number, number];
}

export interface RectShape {
  component: ComponentName;
  kind: "rect";
  center: [number, number];
  size: [number, number];
  theta: number;
}

export type Shape = EllipseShape | RectShape;

export function round2(v: number): number {
  return Math.round(v * 100) / 100;
}

/** Wrap an angle into [-pi/2, pi/2); a rectangle is invariant under half turns. */
export function normalizeTheta(theta: number): number {
  const pi = Math.PI;
  let t = ((theta + pi / 2) % pi + pi) % pi - pi / 2;
  if (t >= pi / 2) t -= pi;
  return t;
}

export function pointInShape(shape: Shape, x: number, y: number): boolean {
  if (shape.kind === "ellipse") {
    const a = Math.max(shape.axes[0], 0.5);
    const b = Math.max(shape.axes[1], 0.5);
    const dx = (x - shape.center[0]) / a;
    const dy = (y - shape.center[1]) / b;
    return dx * dx + dy * dy <= 1;
  }
  const c = Math.cos(shape.theta);
  const s = Math.sin(shape.theta);
  const dx = x - shape.center[0];
  const dy = y - shape.center[1];
  const u = dx * c + dy * s;
  const v = -dx * s + dy * c;
  return Math.abs(u) <= shape.size[0] / 2 && Math.abs(v) <= shape.size[1] / 2;
}

/** Create a shape from a drag's bounding corners. */
export function shapeFromDrag(
  component: ComponentName, kind: "ellipse" | "rect",
  x0: number, y0: number, x1: number, y1: number): Shape {
  const cx = round2((x0 + x1) / 2);
  const cy = round2((y0 + y1) / 2);
  const w = Math.max(Math.abs(x1 - x0), 1);
  const h = Math.max(Math.abs(y1 - y0), 1);
  if (kind === "ellipse") {
    return { component, kind, center: [cx, cy], axes: [round2(w / 2), round2(h / 2)] };
  }
  return { component, kind, center: [cx, cy], size: [round2(w), round2(h)], theta: 0 };
}

export function translated(shape: Shape, dx: number, dy: number): Shape {
  const center: [number, number] =
    [round2(shape.center[0] + dx), round2(shape.center[1] + dy)];
  return { ...shape, center };
}

/** Resize by moving one corner handle; the opposite corner stays fixed. */
export function resized(shape: Shape, handleX: number, handleY: number): Shape {
  const [cx, cy] = shape.center;
  if (shape.kind === "ellipse") {
    return {
      ...shape,
      axes: [round2(Math.max(Math.abs(handleX - cx), 1)),
             round2(Math.max(Math.abs(handleY - cy), 1))],
    };
  }
  const c = Math.cos(shape.theta);
  const s = Math.sin(shape.theta);
  const u = (handleX - cx) * c + (handleY - cy) * s;
  const v = -(handleX - cx) * s + (handleY - cy) * c;
  return {
    ...shape,
    size: [round2(Math.max(Math.abs(u) * 2, 1)), round2(Math.max(Math.abs(v) * 2, 1))],
  };
}

/** Rotate a rect so its width axis points at the pointer; ellipses ignore it. */
export function rotatedTowards(shape: Shape, x: number, y: number): Shape {
  if (shape.kind !== "rect") return shape;
  const theta = normalizeTheta(
    Math.atan2(y - shape.center[1], x - shape.center[0]));
  return { ...shape, theta: Math.round(theta * 1e6) / 1e6 };
}

/** The draggable handle positions for a shape (corners plus rotate knob). */
export function handlePositions(shape: Shape): { x: number; y: number; role: string }[] {
  const [cx, cy] = shape.center;
  if (shape.kind === "ellipse") {
    const [a, b] = shape.axes;
    return [
      { x: cx + a, y: cy + b, role: "resize" },
      { x: cx - a, y: cy - b, role: "resize" },
    ];
  }
  const c = Math.cos(shape.theta);
  const s = Math.sin(shape.theta);
  const [w, h] = shape.size;
  const corner = (u: number, v: number) => ({
    x: cx + u * c - v * s, y: cy + u * s + v * c,
  });
  const knob = corner(w / 2 + 6, 0);
  return [
    { ...corner(w / 2, h / 2), role: "resize" },
    { ...corner(-w / 2, -h / 2), role: "resize" },
    { x: knob.x, y: knob.y, role: "rotate" },
  ];
}
