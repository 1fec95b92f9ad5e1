/**
 * Typed client for the studio service. Every mutation goes through the
 * documented endpoints; the UI holds no other channel to the backend.
 */

import { z } from "zod";

export const StrengthSchema = z.object({
  lambda: z.number().min(0).max(1).default(1.0),
  s_end: z.number().gt(0).max(1).default(1.0),
  n_samples: z.number().int().positive().default(256),
});
export type Strength = z.infer<typeof StrengthSchema>;

export const SessionInfoSchema = z.object({
  id: z.string(),
  state: z.enum(["idle", "generating", "previewable", "editing", "reconstructing", "done", "failed"]),
  prompt_tag: z.string(),
  seed: z.number(),
  strength: z.object({ lambda: z.number(), s_end: z.number(), n_samples: z.number() }),
  part_ids: z.array(z.number()),
  artifacts: z.array(z.string()),
  has_cache: z.boolean(),
  can_undo: z.boolean(),
  n_views: z.number(),
  image_size: z.number(),
  error: z.string().nullable().optional(),
});
export type SessionInfo = z.infer<typeof SessionInfoSchema>;

export const JobSchema = z.object({
  job_id: z.string(),
  session_id: z.string(),
  state: z.string(),
  kind: z.string(),
});
export type Job = z.infer<typeof JobSchema>;

export interface ProxyDocument {
  version: number;
  primitives: Array<{
    kind: "cuboid" | "sphere" | "cylinder" | "cone";
    center: [number, number, number];
    half_extents: [number, number, number];
    rotation: [number, number, number, number];
    part_id: number;
    label?: string;
  }>;
  bounds?: { min: [number, number, number]; max: [number, number, number] };
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
    public field?: string,
  ) {
    super(`${status}: ${detail}`);
  }
}

async function parseError(resp: Response): Promise<never> {
  let detail = resp.statusText;
  let field: string | undefined;
  try {
    const body = await resp.json();
    detail = body.detail ?? JSON.stringify(body);
    field = body.field;
  } catch {
    /* non-JSON error body */
  }
  throw new ApiError(resp.status, detail, field);
}

export class StudioApi {
  constructor(
    public baseUrl: string,
    private fetchFn: typeof fetch = fetch,
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, init);
    if (!resp.ok) await parseError(resp);
    return resp;
  }

  private async json<T>(schema: z.ZodType<T>, path: string, init?: RequestInit): Promise<T> {
    const resp = await this.request(path, init);
    return schema.parse(await resp.json());
  }

  async createSession(proxy: ProxyDocument, promptTag: string, strength: Strength, seed: number): Promise<SessionInfo> {
    return this.json(SessionInfoSchema, "/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ proxy, prompt_tag: promptTag, strength, seed }),
    });
  }

  async getSession(id: string): Promise<SessionInfo> {
    return this.json(SessionInfoSchema, `/sessions/${id}`);
  }

  async generate(
    id: string,
    opts: { candidateB64?: string; nCandidates?: number; candidateIndex?: number; steps?: number; requestToken?: string } = {},
  ): Promise<Job> {
    return this.json(JobSchema, `/sessions/${id}/generate`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        candidate_image_b64: opts.candidateB64,
        n_candidates: opts.nCandidates ?? 1,
        candidate_index: opts.candidateIndex ?? 0,
        steps: opts.steps,
        request_token: opts.requestToken,
      }),
    });
  }

  /** PNG bytes of a cached-volume preview at an orbit pose. */
  async preview(id: string, az: number, el: number, steps?: number): Promise<Blob> {
    const params = new URLSearchParams({ az: String(az), el: String(el) });
    if (steps !== undefined) params.set("steps", String(steps));
    const resp = await this.request(`/sessions/${id}/preview?${params}`);
    return resp.blob();
  }

  async edit(
    id: string,
    parts: number[],
    opts: { view?: { azimuth: number; elevation: number }; promptTag?: string; radius?: number; seed?: number; requestToken?: string } = {},
  ): Promise<Job> {
    return this.json(JobSchema, `/sessions/${id}/edit`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        parts,
        view: opts.view,
        prompt_tag: opts.promptTag,
        radius: opts.radius ?? 2,
        seed: opts.seed,
        request_token: opts.requestToken,
      }),
    });
  }

  async undo(id: string): Promise<SessionInfo> {
    return this.json(SessionInfoSchema, `/sessions/${id}/undo`, { method: "POST" });
  }

  async reconstruct(
    id: string,
    opts: { iterations?: number; useVolumeGuidance?: boolean; meshResolution?: number; requestToken?: string } = {},
  ): Promise<Job> {
    return this.json(JobSchema, `/sessions/${id}/reconstruct`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        iterations: opts.iterations,
        use_volume_guidance: opts.useVolumeGuidance ?? true,
        mesh_resolution: opts.meshResolution,
        request_token: opts.requestToken,
      }),
    });
  }

  async artifact(id: string, name: string): Promise<Blob> {
    const resp = await this.request(`/sessions/${id}/artifacts/${name}`);
    return resp.blob();
  }

  artifactUrl(id: string, name: string): string {
    return `${this.baseUrl}/sessions/${id}/artifacts/${name}`;
  }

  streamUrl(id: string): string {
    return `${this.baseUrl}/sessions/${id}/stream`;
  }

  /** Poll until the session leaves active states; rejects on "failed". */
  async waitSettled(id: string, pollMs = 250, timeoutMs = 600_000): Promise<SessionInfo> {
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const info = await this.getSession(id);
      if (info.state === "failed") throw new ApiError(500, info.error ?? "job failed");
      if (!["generating", "editing", "reconstructing"].includes(info.state)) return info;
      if (Date.now() > deadline) throw new ApiError(408, "timed out waiting for job");
      await new Promise((r) => setTimeout(r, pollMs));
    }
  }
}
