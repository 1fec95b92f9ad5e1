/**
 * Scripted end-to-end loop against a live service process: assemble a
 * 3-primitive proxy, generate (watching per-step thumbnails on the
 * stream), orbit-preview at three poses, regenerate one part, undo, and
 * round-trip the scene file. No browser binary exists in this
 * environment, so the loop drives the same client/store modules the page
 * uses, headlessly over real HTTP.
 */

import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { StudioApi } from "../src/api.js";
import { SceneDraft } from "../src/scene.js";
import { StudioStore } from "../src/store.js";
import { ProgressStream, type StreamEvent } from "../src/stream.js";

const PORT = 8611;
const BASE = `http://127.0.0.1:${PORT}`;

let server: ChildProcess;
let workDir: string;

const BOOTSTRAP = `
import torch
from voxstudio.config import TINY
from voxstudio.model import StudioModel
torch.manual_seed(0)
model = StudioModel(TINY)
model.trained = True
model.save(r"%CKPT%")
print("checkpoint written")
`;

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "voxstudio-e2e-"));
  const ckpt = join(workDir, "model.ckpt");
  execFileSync("python3", ["-c", BOOTSTRAP.replace("%CKPT%", ckpt)], { stdio: "pipe" });
  server = spawn(
    "python3",
    ["-m", "voxstudio.cli", "serve", "--port", String(PORT), "--data-dir", join(workDir, "data"), "--checkpoint", ckpt],
    { stdio: "pipe" },
  );
  const deadline = Date.now() + 60_000;
  for (;;) {
    try {
      const r = await fetch(`${BASE}/healthz`);
      if (r.ok) break;
    } catch {
      /* not up yet */
    }
    if (Date.now() > deadline) throw new Error("service did not start");
    await new Promise((r) => setTimeout(r, 250));
  }
}, 90_000);

afterAll(() => {
  server?.kill("SIGTERM");
});

describe("browser-flow end to end", () => {
  const api = new StudioApi(BASE);
  const store = new StudioStore(api);

  it("runs assemble -> generate -> preview x3 -> part edit -> undo", async () => {
    // assemble a 3-primitive snowman
    store.scene.addPrimitive("sphere", { center: [0, -0.3, 0], halfExtents: [0.45, 0.45, 0.45] });
    store.scene.addPrimitive("sphere", { center: [0, 0.35, 0], halfExtents: [0.3, 0.3, 0.3] });
    store.scene.addPrimitive("cone", { center: [0, 0.85, 0], halfExtents: [0.2, 0.18, 0.2] });
    const info = await store.assembleAndSubmit();
    expect(info.state).toBe("idle");
    expect(info.part_ids).toEqual([0, 1, 2]);

    // watch the stream while generating: one progress event per step
    const events: StreamEvent[] = [];
    const stream = new ProgressStream(api.streamUrl(info.id), { onEvent: (e) => events.push(e) });
    stream.start();
    await store.startGeneration();
    stream.stop();
    expect(store.getState().phase).toBe("previewable");
    const progress = events.filter((e) => e.type === "progress");
    expect(progress.length).toBeGreaterThan(0);
    const last = progress[progress.length - 1] as { step: number; total: number; thumbnails?: string[] };
    expect(last.step).toBe(last.total);
    expect(last.thumbnails?.length).toBe(info.n_views);

    // orbit-preview at three poses
    for (const az of [30, 120, 250]) {
      const blob = await api.preview(info.id, az, -30, 2);
      const bytes = new Uint8Array(await blob.arrayBuffer());
      expect([...bytes.slice(0, 4)]).toEqual([137, 80, 78, 71]); // PNG magic
    }

    // select the head and regenerate just that part
    store.scene.toggleSelect(1);
    await store.startPartEdit({ radius: 1, seed: 5 });
    expect(store.getState().phase).toBe("previewable");
    expect(store.getState().canUndo).toBe(true);

    // undo restores the pre-edit artifacts
    await store.undo();
    expect(store.getState().canUndo).toBe(false);
    expect(store.getState().phase).toBe("previewable");

    // refresh from the server alone reconstructs client state
    const fresh = await api.getSession(info.id);
    expect(fresh.state).toBe("previewable");
    expect(fresh.artifacts).toContain("views/view_00.png");
  }, 240_000);

  it("scene export/import round-trips losslessly", () => {
    const draft = new SceneDraft();
    draft.addPrimitive("cuboid", { center: [0.1, -0.2, 0.05], halfExtents: [0.5, 0.1, 0.3] });
    draft.addPrimitive("cylinder", {
      center: [0, 0.2, 0],
      halfExtents: [0.12, 0.3, 0.12],
      rotation: [0.9238795, 0.3826834, 0, 0],
      label: "mast",
    });
    const text = draft.exportJson();
    const back = SceneDraft.importJson(text);
    expect(back.exportJson()).toBe(text);
    expect(back.primitives).toEqual(draft.primitives);
  });
});
