/**
 * DOM wiring: primitive palette, strength sliders, candidate row, live
 * view grid fed by the stream, orbit preview viewport, part-edit and undo
 * controls, and the mesh download link.
 */

import { StudioApi } from "./api.js";
import { N_SAMPLES_CHOICES, SceneDraft, type PrimitiveKind } from "./scene.js";
import { StudioStore } from "./store.js";
import { StudioViewport } from "./viewport.js";

const api = new StudioApi(localStorage.getItem("voxstudio.base") ?? "");
const store = new StudioStore(api);
const scene = store.scene;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

const viewport = new StudioViewport(el<HTMLCanvasElement>("viewport"), scene, {
  onSelect: (partId) => {
    scene.clearSelection();
    if (partId !== null) scene.toggleSelect(partId);
    viewport.syncFromDraft();
    render();
  },
  onOrbit: (az, elv) => {
    const info = store.getState().session;
    if (info && ["previewable", "done"].includes(info.state)) {
      void store.requestPreview(az, elv).catch(() => undefined);
    }
  },
  onTransform: () => render(),
});

function addPrimitive(kind: PrimitiveKind): void {
  const offset = scene.primitives.length * 0.25 - 0.25;
  scene.addPrimitive(kind, { center: [0, offset, 0] });
  viewport.syncFromDraft();
  render();
}

for (const kind of ["cuboid", "sphere", "cylinder", "cone"] as PrimitiveKind[]) {
  el<HTMLButtonElement>(`add-${kind}`).addEventListener("click", () => addPrimitive(kind));
}

for (const mode of ["translate", "rotate", "scale"] as const) {
  el<HTMLButtonElement>(`mode-${mode}`).addEventListener("click", () => viewport.setGizmoMode(mode));
}

el<HTMLInputElement>("slider-lambda").addEventListener("input", (e) => {
  scene.setStrength({ lambda: Number((e.target as HTMLInputElement).value) });
  render();
});
el<HTMLInputElement>("slider-send").addEventListener("input", (e) => {
  scene.setStrength({ s_end: Math.max(0.01, Number((e.target as HTMLInputElement).value)) });
  render();
});
el<HTMLSelectElement>("select-nsamples").addEventListener("change", (e) => {
  scene.setStrength({ n_samples: Number((e.target as HTMLSelectElement).value) });
  render();
});

el<HTMLButtonElement>("submit").addEventListener("click", () => {
  scene.promptText = el<HTMLInputElement>("prompt").value || "generic";
  void store
    .assembleAndSubmit()
    .then(() => store.startGeneration({ nCandidates: 4 }))
    .catch((err) => showBanner(String(err)));
});

el<HTMLButtonElement>("edit").addEventListener("click", () => {
  const { azimuth, elevation } = viewport.orbitPose();
  void store
    .startPartEdit({ view: { azimuth, elevation }, promptTag: el<HTMLInputElement>("prompt").value })
    .catch((err) => showBanner(String(err)));
});

el<HTMLButtonElement>("undo").addEventListener("click", () => {
  void store.undo().catch((err) => showBanner(String(err)));
});

el<HTMLButtonElement>("reconstruct").addEventListener("click", () => {
  void store.startReconstruction().catch((err) => showBanner(String(err)));
});

el<HTMLButtonElement>("export").addEventListener("click", () => {
  const blob = new Blob([scene.exportJson()], { type: "application/json" });
  const a = document.createElement("a");
  a.href = URL.createObjectURL(blob);
  a.download = "proxy.json";
  a.click();
});

el<HTMLInputElement>("import").addEventListener("change", async (e) => {
  const file = (e.target as HTMLInputElement).files?.[0];
  if (!file) return;
  const imported = SceneDraft.importJson(await file.text());
  scene.primitives = imported.primitives;
  scene.clearSelection();
  viewport.syncFromDraft();
  render();
});

function showBanner(text: string): void {
  const banner = el<HTMLDivElement>("banner");
  banner.textContent = text;
  banner.style.display = "block";
  setTimeout(() => (banner.style.display = "none"), 6000);
}

function render(): void {
  const state = store.getState();
  el<HTMLButtonElement>("submit").disabled = !scene.canSubmit;
  el<HTMLButtonElement>("edit").disabled = !scene.canEdit || state.phase !== "previewable";
  el<HTMLButtonElement>("undo").disabled = !state.canUndo;
  el<HTMLButtonElement>("reconstruct").disabled = !["previewable", "done"].includes(state.phase);
  el<HTMLSpanElement>("phase").textContent = state.phase + (state.stale ? " (stale)" : "");
  el<HTMLSpanElement>("selection").textContent = [...scene.selection].join(", ") || "none";

  const progress = el<HTMLDivElement>("progress");
  progress.textContent = state.progress
    ? `${state.progress.phase}: step ${state.progress.step}/${state.progress.total}`
    : "";

  const grid = el<HTMLDivElement>("view-grid");
  grid.replaceChildren(
    ...state.thumbnails.map((b64) => {
      const img = document.createElement("img");
      img.src = `data:image/png;base64,${b64}`;
      img.className = "thumb";
      return img;
    }),
  );
  if (state.previewUrl) el<HTMLImageElement>("preview").src = state.previewUrl;

  const mesh = store.meshDownloadUrl();
  const link = el<HTMLAnchorElement>("mesh-link");
  link.style.display = mesh ? "inline" : "none";
  if (mesh) link.href = mesh;
}

store.subscribe(() => render());
render();
