/**
 * Scene draft: the primitives a user assembles before submitting, plus
 * selection and control-strength slider state. Serializes losslessly to
 * the proxy document the service consumes.
 */

import type { ProxyDocument, Strength } from "./api.js";

export type PrimitiveKind = "cuboid" | "sphere" | "cylinder" | "cone";

export interface DraftPrimitive {
  kind: PrimitiveKind;
  center: [number, number, number];
  halfExtents: [number, number, number];
  rotation: [number, number, number, number]; // (w, x, y, z) unit quaternion
  partId: number;
  label: string;
}

export const N_SAMPLES_CHOICES = [128, 256, 512] as const;

/** Paper defaults: full control strength, 256 proxy samples. */
export function defaultStrength(): Strength {
  return { lambda: 1.0, s_end: 1.0, n_samples: 256 };
}

export class SceneDraft {
  primitives: DraftPrimitive[] = [];
  selection = new Set<number>();
  strength: Strength = defaultStrength();
  promptText = "generic";
  seed = 0;
  sessionId: string | null = null;

  private nextPartId = 0;

  addPrimitive(kind: PrimitiveKind, partial: Partial<DraftPrimitive> = {}): DraftPrimitive {
    const prim: DraftPrimitive = {
      kind,
      center: partial.center ?? [0, 0, 0],
      halfExtents: partial.halfExtents ?? [0.3, 0.3, 0.3],
      rotation: partial.rotation ?? [1, 0, 0, 0],
      partId: partial.partId ?? this.nextPartId,
      label: partial.label ?? "",
    };
    if (this.primitives.some((p) => p.partId === prim.partId)) {
      throw new Error(`duplicate part id ${prim.partId}`);
    }
    this.primitives.push(prim);
    this.nextPartId = Math.max(this.nextPartId, prim.partId + 1);
    return prim;
  }

  removePrimitive(partId: number): void {
    this.primitives = this.primitives.filter((p) => p.partId !== partId);
    this.selection.delete(partId);
  }

  get partIds(): number[] {
    return this.primitives.map((p) => p.partId);
  }

  /** Selection is always clipped to existing parts. */
  toggleSelect(partId: number): void {
    if (!this.partIds.includes(partId)) return;
    if (this.selection.has(partId)) this.selection.delete(partId);
    else this.selection.add(partId);
  }

  clearSelection(): void {
    this.selection.clear();
  }

  get canSubmit(): boolean {
    return this.primitives.length >= 1;
  }

  get canEdit(): boolean {
    return this.selection.size >= 1;
  }

  setStrength(update: Partial<Strength>): void {
    const next = { ...this.strength, ...update };
    if (next.lambda < 0 || next.lambda > 1) throw new Error("lambda must be in [0, 1]");
    if (next.s_end <= 0 || next.s_end > 1) throw new Error("s_end must be in (0, 1]");
    if (!N_SAMPLES_CHOICES.includes(next.n_samples as (typeof N_SAMPLES_CHOICES)[number])) {
      throw new Error(`n_samples must be one of ${N_SAMPLES_CHOICES.join(", ")}`);
    }
    this.strength = next;
  }

  toProxyDocument(): ProxyDocument {
    return {
      version: 1,
      primitives: this.primitives.map((p) => ({
        kind: p.kind,
        center: [...p.center] as [number, number, number],
        half_extents: [...p.halfExtents] as [number, number, number],
        rotation: [...p.rotation] as [number, number, number, number],
        part_id: p.partId,
        ...(p.label ? { label: p.label } : {}),
      })),
    };
  }

  static fromProxyDocument(doc: ProxyDocument): SceneDraft {
    const draft = new SceneDraft();
    for (const p of doc.primitives) {
      draft.addPrimitive(p.kind, {
        center: [...p.center] as [number, number, number],
        halfExtents: [...p.half_extents] as [number, number, number],
        rotation: [...p.rotation] as [number, number, number, number],
        partId: p.part_id,
        label: p.label ?? "",
      });
    }
    return draft;
  }

  /** Export for download / re-import; identical scene after a round trip. */
  exportJson(): string {
    return JSON.stringify(this.toProxyDocument(), null, 2);
  }

  static importJson(text: string): SceneDraft {
    return SceneDraft.fromProxyDocument(JSON.parse(text) as ProxyDocument);
  }
}
