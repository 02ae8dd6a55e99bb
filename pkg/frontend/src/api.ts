/** Thin typed client over the annotation service HTTP API. */

import type { LegendEntry, RleMask } from "./rle.js";

export interface SessionInfo {
  session_id: string;
  height: number;
  width: number;
  legend: LegendEntry[];
}

export interface JobStatus {
  state: "queued" | "running" | "done" | "failed";
  step: number;
  fraction: number;
  loss_breakdown_tail: Record<string, number>[];
  error: string | null;
}

export interface PredictionResponse {
  version: number;
  mask: RleMask;
  legend: LegendEntry[];
  latest: number;
}

export interface AnnotationPoint {
  row: number;
  col: number;
  class_id: number;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: typeof fetch = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    if (!res.ok) {
      throw new ApiError(res.status, await res.text());
    }
    return (await res.json()) as T;
  }

  async createSession(image: Blob, checkpoint: string): Promise<SessionInfo> {
    const form = new FormData();
    form.append("image", image, "image.png");
    const query = new URLSearchParams({ checkpoint });
    return this.request<SessionInfo>(`/sessions?${query}`, { method: "POST", body: form });
  }

  async registerClass(sessionId: string, name: string): Promise<{ class_id: number; legend: LegendEntry[] }> {
    return this.request(`/sessions/${sessionId}/classes`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ name }),
    });
  }

  async submitAnnotations(sessionId: string, points: AnnotationPoint[]): Promise<{ count: number }> {
    return this.request(`/sessions/${sessionId}/annotations`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ points }),
    });
  }

  async startFinetune(sessionId: string, overrides: Record<string, unknown> = {}): Promise<{ job_id: string }> {
    return this.request(`/sessions/${sessionId}/finetune`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(overrides),
    });
  }

  async getJob(jobId: string): Promise<JobStatus> {
    return this.request(`/jobs/${jobId}`);
  }

  async getPrediction(sessionId: string, version: number): Promise<PredictionResponse> {
    return this.request(`/sessions/${sessionId}/predictions/${version}`);
  }
}

/**
 * Poll a job until it reaches a terminal state. Only one poll loop should
 * run at a time; onProgress receives each observed status.
 */
export async function pollJob(
  api: ApiClient,
  jobId: string,
  onProgress?: (status: JobStatus) => void,
  intervalMs = 500,
): Promise<JobStatus> {
  for (;;) {
    const status = await api.getJob(jobId);
    onProgress?.(status);
    if (status.state === "done") {
      return status;
    }
    if (status.state === "failed") {
      throw new Error(status.error ?? "fine-tune job failed");
    }
    await new Promise((resolve) => setTimeout(resolve, intervalMs));
  }
}
