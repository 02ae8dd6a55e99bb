/**
 * Client-side annotation session state.
 *
 * Buffers clicks locally until they are submitted, supports undoing the
 * last unsubmitted click, tracks which prediction version is displayed,
 * and ensures at most one fine-tune job is polled at a time.
 */

import { ApiClient, pollJob, type AnnotationPoint, type JobStatus, type SessionInfo } from "./api.js";
import type { LegendEntry, RleMask } from "./rle.js";

export interface PredictionView {
  version: number;
  mask: RleMask;
  legend: LegendEntry[];
}

export class UiSession {
  readonly sessionId: string;
  readonly height: number;
  readonly width: number;
  legend: LegendEntry[];
  newClassId: number | null = null;

  /** Clicks not yet sent to the server. */
  private pending: AnnotationPoint[] = [];
  /** Clicks the server has accepted, keyed "row,col" to block duplicates. */
  private submitted = new Set<string>();

  private displayedVersion = 0;
  private latestVersion = 0;
  private jobRunning = false;

  constructor(private api: ApiClient, info: SessionInfo) {
    this.sessionId = info.session_id;
    this.height = info.height;
    this.width = info.width;
    this.legend = info.legend;
  }

  static async create(api: ApiClient, image: Blob, checkpoint: string): Promise<UiSession> {
    const info = await api.createSession(image, checkpoint);
    return new UiSession(api, info);
  }

  async registerClass(name: string): Promise<number> {
    const res = await this.api.registerClass(this.sessionId, name);
    this.newClassId = res.class_id;
    this.legend = res.legend;
    return res.class_id;
  }

  /**
   * Buffer a click. Returns false (and buffers nothing) when the point
   * is out of bounds or duplicates an existing click.
   */
  addClick(row: number, col: number, classId: number): boolean {
    if (row < 0 || row >= this.height || col < 0 || col >= this.width) {
      return false;
    }
    const key = `${row},${col}`;
    if (this.submitted.has(key) || this.pending.some((p) => p.row === row && p.col === col)) {
      return false;
    }
    this.pending.push({ row, col, class_id: classId });
    return true;
  }

  /** Remove and return the most recent unsubmitted click, if any. */
  undoLastClick(): AnnotationPoint | null {
    return this.pending.pop() ?? null;
  }

  get pendingClicks(): readonly AnnotationPoint[] {
    return this.pending;
  }

  get submittedCount(): number {
    return this.submitted.size;
  }

  /** Push buffered clicks to the server; they can no longer be undone. */
  async submitClicks(): Promise<number> {
    if (this.pending.length === 0) {
      return this.submitted.size;
    }
    const batch = this.pending;
    this.pending = [];
    try {
      await this.api.submitAnnotations(this.sessionId, batch);
    } catch (err) {
      this.pending = batch; // keep the buffer so the user can retry
      throw err;
    }
    for (const p of batch) {
      this.submitted.add(`${p.row},${p.col}`);
    }
    return this.submitted.size;
  }

  get isTraining(): boolean {
    return this.jobRunning;
  }

  /**
   * Start fine-tuning and poll to completion. Rejects when a job is
   * already in flight so only one poll loop exists at a time.
   */
  async finetune(
    overrides: Record<string, unknown> = {},
    onProgress?: (status: JobStatus) => void,
    intervalMs = 500,
  ): Promise<PredictionView> {
    if (this.jobRunning) {
      throw new Error("a fine-tune job is already running for this session");
    }
    this.jobRunning = true;
    try {
      const { job_id } = await this.api.startFinetune(this.sessionId, overrides);
      await pollJob(this.api, job_id, onProgress, intervalMs);
    } finally {
      this.jobRunning = false;
    }
    // The finished job appended a new prediction version; fetch it.
    const latest = await this.api.getPrediction(this.sessionId, this.latestVersion);
    this.latestVersion = latest.latest;
    return this.showVersion(this.latestVersion);
  }

  /** Fetch and select a prediction version for display. */
  async showVersion(version: number): Promise<PredictionView> {
    const res = await this.api.getPrediction(this.sessionId, version);
    this.latestVersion = res.latest;
    this.displayedVersion = res.version;
    return { version: res.version, mask: res.mask, legend: res.legend };
  }

  get currentVersion(): number {
    return this.displayedVersion;
  }

  get knownLatestVersion(): number {
    return this.latestVersion;
  }
}
