/**
 * Application state: one session bound to a scene draft, the streaming
 * progress feed, preview frames, and the undo control. Job state is never
 * optimistic; it always reflects the last server response or stream event.
 */

import { ApiError, StudioApi, type SessionInfo } from "./api.js";
import { SceneDraft } from "./scene.js";
import { ProgressStream, type StreamEvent } from "./stream.js";

export type Phase =
  | "assembling"
  | "generating"
  | "previewable"
  | "editing"
  | "reconstructing"
  | "done"
  | "failed";

export interface StoreState {
  phase: Phase;
  session: SessionInfo | null;
  progress: { phase: string; step: number; total: number } | null;
  thumbnails: string[]; // latest per-view base64 PNGs from the stream
  previewUrl: string | null;
  candidates: string[]; // artifact names of generated candidates
  stale: boolean;
  banner: string | null; // queued-intent / error banner, never auto-retried
  canUndo: boolean;
}

type Listener = (state: StoreState) => void;

export class StudioStore {
  readonly scene: SceneDraft;
  private state: StoreState = {
    phase: "assembling",
    session: null,
    progress: null,
    thumbnails: [],
    previewUrl: null,
    candidates: [],
    stale: false,
    banner: null,
    canUndo: false,
  };
  private listeners = new Set<Listener>();
  private stream: ProgressStream | null = null;
  private previewToken = 0;

  constructor(
    private api: StudioApi,
    scene?: SceneDraft,
  ) {
    this.scene = scene ?? new SceneDraft();
  }

  getState(): StoreState {
    return { ...this.state };
  }

  subscribe(fn: Listener): () => void {
    this.listeners.add(fn);
    return () => this.listeners.delete(fn);
  }

  private update(patch: Partial<StoreState>): void {
    this.state = { ...this.state, ...patch };
    for (const fn of this.listeners) fn(this.getState());
  }

  private phaseFromServer(info: SessionInfo): Phase {
    if (info.state === "idle") return "assembling";
    return info.state as Phase;
  }

  /** POST /sessions with the serialized scene; moves to candidate selection. */
  async assembleAndSubmit(): Promise<SessionInfo> {
    if (!this.scene.canSubmit) throw new Error("scene is empty; add a primitive first");
    try {
      const info = await this.api.createSession(
        this.scene.toProxyDocument(),
        this.scene.promptText,
        this.scene.strength,
        this.scene.seed,
      );
      this.scene.sessionId = info.id;
      this.update({ session: info, phase: "assembling", banner: null });
      return info;
    } catch (err) {
      if (err instanceof ApiError && err.field) {
        // surfaced inline at the offending primitive by the panel layer
        this.update({ banner: `${err.field}: ${err.detail}` });
      }
      throw err;
    }
  }

  private attachStream(sessionId: string): void {
    this.stream?.stop();
    this.stream = new ProgressStream(this.api.streamUrl(sessionId), {
      onEvent: (event) => this.onStreamEvent(event),
      onStale: (stale) => this.update({ stale }),
    });
    this.stream.start();
  }

  private onStreamEvent(event: StreamEvent): void {
    if (event.type === "progress") {
      this.update({
        progress: { phase: event.phase, step: event.step, total: event.total },
        thumbnails: event.thumbnails ?? this.state.thumbnails,
      });
    } else if (event.type === "state") {
      void this.refresh();
    }
  }

  async refresh(): Promise<SessionInfo> {
    const id = this.requireSession();
    const info = await this.api.getSession(id);
    this.update({
      session: info,
      phase: this.phaseFromServer(info),
      canUndo: info.can_undo,
      candidates: info.artifacts.filter((a) => a.startsWith("candidates/")),
    });
    return info;
  }

  private requireSession(): string {
    const id = this.scene.sessionId;
    if (!id) throw new Error("no session yet; submit the scene first");
    return id;
  }

  async startGeneration(opts: { candidateB64?: string; nCandidates?: number; candidateIndex?: number; steps?: number } = {}): Promise<void> {
    const id = this.requireSession();
    this.attachStream(id);
    try {
      await this.api.generate(id, { ...opts, requestToken: `gen-${id}-${this.scene.seed}-${Date.now()}` });
      this.update({ phase: "generating", banner: null, thumbnails: [] });
    } catch (err) {
      this.bannerOnConflict(err, "generation already running; intent noted, not retried");
      throw err;
    }
    await this.api.waitSettled(id);
    await this.refresh();
  }

  /** Orbit moved: fetch a preview frame; stale responses are dropped. */
  async requestPreview(az: number, el: number, steps?: number): Promise<string | null> {
    const id = this.requireSession();
    const token = ++this.previewToken;
    const blob = await this.api.preview(id, az, el, steps);
    if (token !== this.previewToken) return null; // superseded while in flight
    const url = URL.createObjectURL(blob);
    this.update({ previewUrl: url });
    return url;
  }

  async startPartEdit(opts: { view?: { azimuth: number; elevation: number }; promptTag?: string; radius?: number; seed?: number } = {}): Promise<void> {
    const id = this.requireSession();
    if (!this.scene.canEdit) throw new Error("select at least one part to edit");
    const parts = [...this.scene.selection];
    this.attachStream(id);
    try {
      await this.api.edit(id, parts, { ...opts, requestToken: `edit-${id}-${parts.join("_")}-${Date.now()}` });
      this.update({ phase: "editing", banner: null });
    } catch (err) {
      this.bannerOnConflict(err, "session busy; edit intent queued for you to resubmit");
      throw err;
    }
    await this.api.waitSettled(id);
    await this.refresh();
  }

  async undo(): Promise<void> {
    const id = this.requireSession();
    const info = await this.api.undo(id);
    this.update({ session: info, phase: this.phaseFromServer(info), canUndo: info.can_undo });
  }

  async startReconstruction(opts: { iterations?: number; useVolumeGuidance?: boolean } = {}): Promise<void> {
    const id = this.requireSession();
    this.attachStream(id);
    await this.api.reconstruct(id, opts);
    this.update({ phase: "reconstructing" });
    await this.api.waitSettled(id);
    await this.refresh();
  }

  meshDownloadUrl(): string | null {
    const info = this.state.session;
    if (!info) return null;
    const meshes = info.artifacts.filter((a) => a.startsWith("mesh_") && a.endsWith(".glb")).sort();
    const latest = meshes[meshes.length - 1];
    return latest ? this.api.artifactUrl(info.id, latest) : null;
  }

  private bannerOnConflict(err: unknown, message: string): void {
    if (err instanceof ApiError && err.status === 409) {
      this.update({ banner: message });
    }
  }

  dispose(): void {
    this.stream?.stop();
  }
}
