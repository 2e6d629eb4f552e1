// Label-only session view state. The UI never mutates trajectories; it only
// tracks a per-candidate three-way toggle (unset / counterfactual /
// acceptable) and gates submission on every candidate having an explicit
// choice.

import type { LabelsPayload, SessionDoc } from "./types.js";

export type Toggle = "unset" | "counterfactual" | "acceptable";

export interface SessionView {
  doc: SessionDoc;
  toggles: Map<number, Toggle>;
}

export function createView(doc: SessionDoc): SessionView {
  const toggles = new Map<number, Toggle>();
  for (const item of doc.candidates.items) {
    const existing = doc.labels[String(item.id)];
    if (existing === undefined) {
      toggles.set(item.id, "unset");
    } else {
      toggles.set(item.id, existing ? "counterfactual" : "acceptable");
    }
  }
  return { doc, toggles };
}

export function candidateIds(view: SessionView): number[] {
  return view.doc.candidates.items.map((c) => c.id);
}

export function setToggle(view: SessionView, id: number, value: Toggle): void {
  if (!view.toggles.has(id)) {
    throw new Error(`unknown candidate id ${id}`);
  }
  view.toggles.set(id, value);
}

export function cycleToggle(view: SessionView, id: number): Toggle {
  const order: Toggle[] = ["unset", "counterfactual", "acceptable"];
  const current = view.toggles.get(id);
  if (current === undefined) {
    throw new Error(`unknown candidate id ${id}`);
  }
  const next = order[(order.indexOf(current) + 1) % order.length];
  view.toggles.set(id, next);
  return next;
}

export function isComplete(view: SessionView): boolean {
  if (view.toggles.size === 0) {
    return false; // nothing to label: submission stays disabled
  }
  for (const value of view.toggles.values()) {
    if (value === "unset") {
      return false;
    }
  }
  return true;
}

export function submitEnabled(view: SessionView): boolean {
  return view.doc.status === "open" && isComplete(view);
}

export function buildPayload(view: SessionView): LabelsPayload {
  if (!isComplete(view)) {
    throw new Error("every candidate needs an explicit choice before submit");
  }
  const labels = [...view.toggles.entries()]
    .sort((a, b) => a[0] - b[0])
    .map(([candidate_id, value]) => ({
      candidate_id,
      counterfactual: value === "counterfactual",
    }));
  return { labels };
}

// Queue helpers: sessions are annotated in scene-id order.
export function nextOpenSession(
  sessions: { session_id: string; scene_id: string; status: string }[],
  after?: string,
): string | null {
  const open = sessions
    .filter((s) => s.status === "open")
    .sort((a, b) => a.scene_id.localeCompare(b.scene_id));
  if (open.length === 0) {
    return null;
  }
  if (after !== undefined) {
    const later = open.find((s) => s.session_id !== after);
    return later ? later.session_id : null;
  }
  return open[0].session_id;
}
