import { beforeEach, describe, expect, it } from "vitest";

import { ApiError, StudioApi } from "../src/api.js";
import { StudioStore } from "../src/store.js";

/** Minimal in-memory service double mirroring the HTTP contract. */
class FakeService {
  state = "idle";
  canUndo = false;
  generateCalls = 0;
  editCalls = 0;
  busy = false;
  artifacts: string[] = [];

  private info() {
    return {
      id: "s1",
      state: this.state,
      prompt_tag: "generic",
      seed: 0,
      strength: { lambda: 1, s_end: 1, n_samples: 256 },
      part_ids: [0, 1, 2],
      artifacts: this.artifacts,
      has_cache: this.state !== "idle",
      can_undo: this.canUndo,
      n_views: 3,
      image_size: 16,
      error: null,
    };
  }

  fetch = async (url: string | URL | Request, init?: RequestInit): Promise<Response> => {
    const path = String(url);
    const json = (body: object, status = 200) =>
      new Response(JSON.stringify(body), { status, headers: { "content-type": "application/json" } });

    if (path.endsWith("/sessions") && init?.method === "POST") {
      const body = JSON.parse(String(init.body));
      const bad = body.proxy.primitives.findIndex((p: { half_extents: number[] }) =>
        p.half_extents.some((h: number) => h <= 0),
      );
      if (bad >= 0) {
        return json(
          { error: "ProxyValidationError", detail: "must be strictly positive", field: `primitives[${bad}].half_extents` },
          422,
        );
      }
      this.state = "idle";
      return json(this.info(), 201);
    }
    if (path.includes("/generate")) {
      if (this.busy) return json({ error: "BusyError", detail: "busy" }, 409);
      this.generateCalls += 1;
      this.state = "previewable";
      this.artifacts = ["views/view_00.png", "candidates/cand_00.png"];
      return json({ job_id: "j1", session_id: "s1", state: "generating", kind: "generation" }, 202);
    }
    if (path.includes("/edit")) {
      if (this.busy) return json({ error: "BusyError", detail: "busy" }, 409);
      this.editCalls += 1;
      this.state = "previewable";
      this.canUndo = true;
      return json({ job_id: "j2", session_id: "s1", state: "editing", kind: "edit" }, 202);
    }
    if (path.includes("/undo")) {
      this.canUndo = false;
      this.state = "previewable";
      return json(this.info());
    }
    if (path.includes("/reconstruct")) {
      this.state = "done";
      this.artifacts = [...this.artifacts, "mesh_v000.glb"];
      return json({ job_id: "j3", session_id: "s1", state: "reconstructing", kind: "reconstruction" }, 202);
    }
    if (path.includes("/preview")) {
      return new Response(new Uint8Array([137, 80, 78, 71]), { status: 200 });
    }
    if (path.includes("/stream")) {
      return new Response(new ReadableStream({ start: (c) => c.close() }), { status: 200 });
    }
    if (path.includes("/sessions/s1")) return json(this.info());
    return json({ error: "NotFound", detail: path }, 404);
  };
}

describe("StudioStore", () => {
  let service: FakeService;
  let store: StudioStore;

  beforeEach(() => {
    service = new FakeService();
    // URL.createObjectURL does not exist in node; previews return blobs anyway
    (globalThis.URL as unknown as { createObjectURL: (b: Blob) => string }).createObjectURL = () => "blob:test";
    store = new StudioStore(new StudioApi("http://fake", service.fetch));
    store.scene.addPrimitive("sphere");
    store.scene.addPrimitive("sphere");
    store.scene.addPrimitive("cone");
  });

  it("submits the scene and runs a generation to previewable", async () => {
    await store.assembleAndSubmit();
    expect(store.scene.sessionId).toBe("s1");
    await store.startGeneration();
    expect(store.getState().phase).toBe("previewable");
    expect(service.generateCalls).toBe(1);
    expect(store.getState().candidates).toEqual(["candidates/cand_00.png"]);
  });

  it("surfaces validation errors inline with the field path", async () => {
    store.scene.primitives[0].halfExtents = [-1, 0.3, 0.3];
    await expect(store.assembleAndSubmit()).rejects.toThrow(ApiError);
    expect(store.getState().banner).toContain("primitives[0].half_extents");
  });

  it("refuses to submit an empty scene", async () => {
    const empty = new StudioStore(new StudioApi("http://fake", service.fetch));
    await expect(empty.assembleAndSubmit()).rejects.toThrow(/empty/);
  });

  it("part edit requires a selection and binds undo", async () => {
    await store.assembleAndSubmit();
    await store.startGeneration();
    await expect(store.startPartEdit()).rejects.toThrow(/select/);
    store.scene.toggleSelect(1);
    await store.startPartEdit();
    expect(service.editCalls).toBe(1);
    expect(store.getState().canUndo).toBe(true);
    await store.undo();
    expect(store.getState().canUndo).toBe(false);
    expect(store.getState().phase).toBe("previewable");
  });

  it("busy conflicts raise a banner and never auto-retry jobs", async () => {
    await store.assembleAndSubmit();
    await store.startGeneration();
    service.busy = true;
    store.scene.toggleSelect(0);
    await expect(store.startPartEdit()).rejects.toThrow(ApiError);
    expect(store.getState().banner).toMatch(/busy|queued/i);
    expect(service.editCalls).toBe(0);
  });

  it("preview drops superseded responses", async () => {
    await store.assembleAndSubmit();
    await store.startGeneration();
    const slow = store.requestPreview(10, -30);
    const fast = await store.requestPreview(20, -30);
    expect(fast).toBe("blob:test");
    expect(await slow).toBeNull(); // the older request lost the race
  });

  it("reconstruction reaches done and exposes the mesh link", async () => {
    await store.assembleAndSubmit();
    await store.startGeneration();
    await store.startReconstruction({ iterations: 5 });
    expect(store.getState().phase).toBe("done");
    expect(store.meshDownloadUrl()).toContain("mesh_v000.glb");
  });
});
