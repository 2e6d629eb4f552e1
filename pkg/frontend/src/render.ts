// Canvas rendering for the BEV context and trajectory overlays.
// Coordinates pass through unchanged: a grid cell (row, col) maps to the
// canvas point ((col + 0.5) * scale, (row + 0.5) * scale) with no
// resampling or smoothing of the served polylines.

import type { SessionContext } from "./types.js";
import type { Toggle } from "./state.js";

export const TERRAIN_COLORS = [
  "#b8b8c0", // class 0 (e.g. sidewalk / pavement)
  "#d8c79a", // class 1
  "#8fae72", // class 2
  "#3a3a3f", // forbidden gets a distinct dark tone plus hatching
  "#c79ad8",
  "#9ad0d8",
];

export const EXPERT_COLOR = "#1f77ff";
export const CANDIDATE_COLORS: Record<Toggle, string> = {
  unset: "#f2a93b",
  counterfactual: "#e03131",
  acceptable: "#2f9e44",
};

export interface PolylinePoint {
  x: number;
  y: number;
}

export function gridToCanvas(
  states: [number, number][],
  scale: number,
): PolylinePoint[] {
  return states.map(([row, col]) => ({
    x: (col + 0.5) * scale,
    y: (row + 0.5) * scale,
  }));
}

export function shadeForElevation(base: string, elevation: number, span: number): string {
  // darken up to 35% across the elevation span
  const f = span > 0 ? 1 - 0.35 * (elevation / span) : 1;
  const n = parseInt(base.slice(1), 16);
  const ch = (shift: number) => Math.round(((n >> shift) & 0xff) * f);
  return `rgb(${ch(16)}, ${ch(8)}, ${ch(0)})`;
}

export function drawContext(
  ctx: CanvasRenderingContext2D,
  context: SessionContext,
  scale: number,
): void {
  const { height, width, terrain_index, elevation, forbidden_mask } = context;
  let span = 0;
  for (const e of elevation) {
    span = Math.max(span, e);
  }
  for (let r = 0; r < height; r++) {
    for (let c = 0; c < width; c++) {
      const i = r * width + c;
      const base = TERRAIN_COLORS[terrain_index[i] % TERRAIN_COLORS.length];
      ctx.fillStyle = shadeForElevation(base, elevation[i], span);
      ctx.fillRect(c * scale, r * scale, scale, scale);
      if (forbidden_mask[i]) {
        ctx.strokeStyle = "#ff5050";
        ctx.lineWidth = 1;
        ctx.beginPath();
        ctx.moveTo(c * scale, r * scale);
        ctx.lineTo((c + 1) * scale, (r + 1) * scale);
        ctx.moveTo((c + 1) * scale, r * scale);
        ctx.lineTo(c * scale, (r + 1) * scale);
        ctx.stroke();
      }
    }
  }
}

export function drawPolyline(
  ctx: CanvasRenderingContext2D,
  states: [number, number][],
  scale: number,
  color: string,
  width: number,
  dashed = false,
): void {
  const pts = gridToCanvas(states, scale);
  if (pts.length === 0) {
    return;
  }
  ctx.strokeStyle = color;
  ctx.lineWidth = width;
  ctx.setLineDash(dashed ? [6, 4] : []);
  ctx.beginPath();
  ctx.moveTo(pts[0].x, pts[0].y);
  for (const p of pts.slice(1)) {
    ctx.lineTo(p.x, p.y);
  }
  ctx.stroke();
  ctx.setLineDash([]);
}
