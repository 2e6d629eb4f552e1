// Thin client for the annotation service HTTP API.

import type { LabelsPayload, SessionDoc, SessionListResponse } from "./types.js";

export type FetchFn = typeof fetch;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function parse<T>(resp: Response): Promise<T> {
  const body = await resp.json();
  if (!resp.ok) {
    throw new ApiError(resp.status, body.error ?? resp.statusText);
  }
  return body as T;
}

export async function listSessions(fetchFn: FetchFn = fetch): Promise<SessionListResponse> {
  return parse(await fetchFn("/api/v1/sessions"));
}

export async function getSession(id: string, fetchFn: FetchFn = fetch): Promise<SessionDoc> {
  return parse(await fetchFn(`/api/v1/sessions/${id}`));
}

export async function submitLabels(
  id: string,
  payload: LabelsPayload,
  fetchFn: FetchFn = fetch,
): Promise<SessionDoc> {
  return parse(
    await fetchFn(`/api/v1/sessions/${id}/labels`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    }),
  );
}
