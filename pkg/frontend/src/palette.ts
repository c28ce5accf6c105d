// Component palette mirrored from the server. Editing colors here without
// changing the server palette will desync the preview from /v1/fit-layout.

export type ComponentName =
  | "hair" | "face" | "top" | "bottom" | "dress" | "shoes" | "hat" | "bag";

export const COMPONENTS: ComponentName[] = [
  "hair", "face", "top", "bottom", "dress", "shoes", "hat", "bag",
];

// painting order: later entries drawn over earlier ones
export const Z_ORDER: ComponentName[] = [
  "dress", "bottom", "top", "shoes", "face", "hair", "hat", "bag",
];

export const COLORS: Record<ComponentName, [number, number, number]> = {
  hair: [150, 75, 0],
  face: [255, 220, 180],
  top: [230, 30, 30],
  bottom: [30, 30, 230],
  dress: [230, 30, 230],
  shoes: [30, 230, 30],
  hat: [230, 230, 30],
  bag: [30, 230, 230],
};

export function cssColor(name: ComponentName): string {
  const [r, g, b] = COLORS[name];
  return `rgb(${r},${g},${b})`;
}

export function zIndex(name: ComponentName): number {
  return Z_ORDER.indexOf(name);
}
