import { describe, expect, it } from "vitest";

import { N_SAMPLES_CHOICES, SceneDraft, defaultStrength } from "../src/scene.js";

function snowman(): SceneDraft {
  const draft = new SceneDraft();
  draft.addPrimitive("sphere", { center: [0, -0.3, 0], halfExtents: [0.45, 0.45, 0.45] });
  draft.addPrimitive("sphere", { center: [0, 0.35, 0], halfExtents: [0.3, 0.3, 0.3] });
  draft.addPrimitive("cone", { center: [0, 0.85, 0], halfExtents: [0.2, 0.18, 0.2], label: "hat" });
  return draft;
}

describe("SceneDraft", () => {
  it("serializes losslessly through export/import", () => {
    const draft = snowman();
    draft.primitives[1].rotation = [0.9238795, 0, 0.3826834, 0];
    const round = SceneDraft.importJson(draft.exportJson());
    expect(round.toProxyDocument()).toEqual(draft.toProxyDocument());
    // and a second round trip is byte-identical
    expect(round.exportJson()).toBe(draft.exportJson());
  });

  it("assigns unique part ids and rejects duplicates", () => {
    const draft = snowman();
    expect(draft.partIds).toEqual([0, 1, 2]);
    expect(() => draft.addPrimitive("cuboid", { partId: 1 })).toThrow(/duplicate/);
  });

  it("keeps selection inside existing part ids", () => {
    const draft = snowman();
    draft.toggleSelect(1);
    draft.toggleSelect(99); // ignored
    expect([...draft.selection]).toEqual([1]);
    draft.removePrimitive(1);
    expect(draft.selection.size).toBe(0);
    expect(draft.canEdit).toBe(false);
  });

  it("submit disabled on an empty scene", () => {
    const draft = new SceneDraft();
    expect(draft.canSubmit).toBe(false);
    draft.addPrimitive("sphere");
    expect(draft.canSubmit).toBe(true);
  });

  it("preselects the published control defaults", () => {
    const s = defaultStrength();
    expect(s.lambda).toBe(1.0);
    expect(s.s_end).toBe(1.0);
    expect(s.n_samples).toBe(256);
  });

  it("sliders map exactly to the allowed ranges", () => {
    const draft = snowman();
    draft.setStrength({ lambda: 0.5, s_end: 0.5, n_samples: 512 });
    expect(draft.strength).toEqual({ lambda: 0.5, s_end: 0.5, n_samples: 512 });
    expect(() => draft.setStrength({ lambda: 1.2 })).toThrow();
    expect(() => draft.setStrength({ s_end: 0 })).toThrow();
    expect(() => draft.setStrength({ n_samples: 100 })).toThrow();
    expect(N_SAMPLES_CHOICES).toEqual([128, 256, 512]);
  });
});
