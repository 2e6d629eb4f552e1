// Documents served by the annotation service (API v1).

export interface SessionSummary {
  session_id: string;
  scene_id: string;
  status: "open" | "complete";
}

export interface SessionListResponse {
  version: number;
  sessions: SessionSummary[];
}

export interface SessionContext {
  height: number;
  width: number;
  cell_size: number;
  terrain_names: string[];
  terrain_index: number[];
  elevation: number[];
  forbidden_mask: number[];
}

export interface CandidateItem {
  id: number;
  side: "left" | "right";
  states: [number, number][];
}

export interface SessionDoc {
  version: number;
  session_id: string;
  scene_id: string;
  status: "open" | "complete";
  context: SessionContext;
  expert: [number, number][];
  candidates: {
    seed: number;
    config: Record<string, unknown>;
    items: CandidateItem[];
  };
  labels: Record<string, boolean>;
}

export interface LabelsPayload {
  labels: { candidate_id: number; counterfactual: boolean }[];
}
