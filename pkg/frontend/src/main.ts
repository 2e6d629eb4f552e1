// Annotation tool wiring: session queue, canvas, toggles, submit flow.
// Number keys 1..9,0 cycle candidate toggles; enter submits when complete.

import { ApiError, getSession, listSessions, submitLabels } from "./api.js";
import {
  buildPayload,
  createView,
  cycleToggle,
  isComplete,
  nextOpenSession,
  SessionView,
  setToggle,
  submitEnabled,
  Toggle,
} from "./state.js";
import { CANDIDATE_COLORS, EXPERT_COLOR, drawContext, drawPolyline } from "./render.js";

const SCALE = 16;

let view: SessionView | null = null;
let focusedCandidate: number | null = null;
let sessionsDone = 0;
const startedAt = Date.now();

const canvas = document.getElementById("bev") as HTMLCanvasElement;
const listEl = document.getElementById("candidates") as HTMLUListElement;
const statusEl = document.getElementById("status") as HTMLDivElement;
const submitBtn = document.getElementById("submit") as HTMLButtonElement;
const legendEl = document.getElementById("legend") as HTMLDivElement;
const footerEl = document.getElementById("footer") as HTMLDivElement;

function note(text: string, isError = false): void {
  statusEl.textContent = text;
  statusEl.className = isError ? "error" : "";
}

function redraw(): void {
  if (!view) {
    return;
  }
  const doc = view.doc;
  canvas.width = doc.context.width * SCALE;
  canvas.height = doc.context.height * SCALE;
  const ctx = canvas.getContext("2d")!;
  drawContext(ctx, doc.context, SCALE);
  for (const item of doc.candidates.items) {
    const toggle = view.toggles.get(item.id) ?? "unset";
    const width = item.id === focusedCandidate ? 4 : 2;
    drawPolyline(ctx, item.states, SCALE, CANDIDATE_COLORS[toggle], width, toggle === "unset");
  }
  drawPolyline(ctx, doc.expert, SCALE, EXPERT_COLOR, 3);
  renderCandidateList();
  submitBtn.disabled = !submitEnabled(view);
  const cellSize = doc.context.cell_size;
  legendEl.textContent =
    `${doc.session_id} | scene ${doc.scene_id} | ${doc.context.width}x` +
    `${doc.context.height} cells at ${cellSize} m/cell | expert in blue, ` +
    `counterfactuals red, acceptable green, unlabeled amber`;
  const minutes = (Date.now() - startedAt) / 60000;
  footerEl.textContent = `${sessionsDone} sessions submitted, ${minutes.toFixed(1)} min elapsed`;
}

function renderCandidateList(): void {
  if (!view) {
    return;
  }
  listEl.replaceChildren();
  for (const item of view.doc.candidates.items) {
    const toggle = view.toggles.get(item.id) ?? "unset";
    const li = document.createElement("li");
    const label = document.createElement("span");
    label.textContent = `candidate ${item.id} (${item.side})`;
    li.appendChild(label);
    for (const value of ["counterfactual", "acceptable"] as Toggle[]) {
      const btn = document.createElement("button");
      btn.textContent = value;
      btn.className = toggle === value ? `active ${value}` : value;
      btn.addEventListener("click", () => {
        setToggle(view!, item.id, value);
        redraw();
      });
      li.appendChild(btn);
    }
    li.addEventListener("mouseenter", () => {
      focusedCandidate = item.id;
      redraw();
    });
    li.addEventListener("mouseleave", () => {
      focusedCandidate = null;
      redraw();
    });
    listEl.appendChild(li);
  }
  if (view.doc.candidates.items.length === 0) {
    note("this session has no candidates; nothing to submit");
  }
}

async function loadNext(after?: string): Promise<void> {
  const listing = await listSessions();
  const id = nextOpenSession(listing.sessions, after);
  if (id === null) {
    view = null;
    note("all sessions complete");
    submitBtn.disabled = true;
    return;
  }
  await load(id);
}

async function load(id: string): Promise<void> {
  try {
    const doc = await getSession(id);
    view = createView(doc);
    focusedCandidate = null;
    note(`labeling ${id}: toggle every candidate, then submit`);
    redraw();
  } catch (err) {
    if (err instanceof ApiError && err.status === 404) {
      note(`session ${id} not found; retrying the queue`, true);
      await loadNext();
    } else {
      note(String(err), true);
    }
  }
}

async function submit(): Promise<void> {
  if (!view || !isComplete(view)) {
    return;
  }
  const id = view.doc.session_id;
  try {
    await submitLabels(id, buildPayload(view));
    sessionsDone += 1;
    note(`submitted ${id}`);
    await loadNext(id);
  } catch (err) {
    if (err instanceof ApiError && err.status === 409) {
      note(`${id} was already complete; reloading`, true);
      await loadNext(id);
    } else {
      note(String(err), true);
    }
  }
}

submitBtn.addEventListener("click", () => void submit());

document.addEventListener("keydown", (event) => {
  if (!view) {
    return;
  }
  if (event.key === "Enter") {
    void submit();
    return;
  }
  if (/^[0-9]$/.test(event.key)) {
    const ids = view.doc.candidates.items.map((c) => c.id);
    const index = event.key === "0" ? 9 : Number(event.key) - 1;
    if (index < ids.length) {
      cycleToggle(view, ids[index]);
      redraw();
    }
  }
});

void loadNext();
