/**
 * Three.js viewport: primitive meshes with transform gizmos for assembly,
 * and an orbit camera that doubles as the preview viewpoint. Orbit motion
 * is debounced into preview requests while a generation exists.
 */

import * as THREE from "three";
import { OrbitControls } from "three/examples/jsm/controls/OrbitControls.js";
import { TransformControls } from "three/examples/jsm/controls/TransformControls.js";

import type { DraftPrimitive, SceneDraft } from "./scene.js";

const PART_COLORS = [0xd95f4e, 0x4e8cd9, 0x66bb66, 0xe6bf40, 0xb373cc, 0x73b3bf];

export type GizmoMode = "translate" | "rotate" | "scale";

export interface ViewportCallbacks {
  onOrbit?: (azimuthDeg: number, elevationDeg: number, distance: number) => void;
  onSelect?: (partId: number | null) => void;
  onTransform?: (partId: number) => void;
}

function primitiveGeometry(kind: DraftPrimitive["kind"]): THREE.BufferGeometry {
  switch (kind) {
    case "cuboid":
      return new THREE.BoxGeometry(2, 2, 2);
    case "sphere":
      return new THREE.SphereGeometry(1, 32, 16);
    case "cylinder":
      return new THREE.CylinderGeometry(1, 1, 2, 32);
    case "cone":
      return new THREE.ConeGeometry(1, 2, 32);
  }
}

export class StudioViewport {
  readonly renderer: THREE.WebGLRenderer;
  readonly scene3 = new THREE.Scene();
  readonly camera: THREE.PerspectiveCamera;
  private orbit: OrbitControls;
  private gizmo: TransformControls;
  private meshes = new Map<number, THREE.Mesh>();
  private raycaster = new THREE.Raycaster();
  private orbitTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private canvas: HTMLCanvasElement,
    private draft: SceneDraft,
    private callbacks: ViewportCallbacks = {},
  ) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.renderer.setSize(canvas.clientWidth || 480, canvas.clientHeight || 480, false);
    this.scene3.background = new THREE.Color(0x10141a);
    this.camera = new THREE.PerspectiveCamera(40, 1, 0.1, 50);
    this.camera.position.set(0, 1.25, 2.17); // elevation -30 equivalent start
    this.scene3.add(new THREE.AmbientLight(0xffffff, 0.55));
    const sun = new THREE.DirectionalLight(0xffffff, 1.1);
    sun.position.set(2, 4, 3);
    this.scene3.add(sun);
    this.scene3.add(new THREE.GridHelper(2, 10, 0x334455, 0x223344));

    this.orbit = new OrbitControls(this.camera, canvas);
    this.orbit.addEventListener("change", () => this.scheduleOrbitPreview());

    this.gizmo = new TransformControls(this.camera, canvas);
    this.gizmo.addEventListener("dragging-changed", (e) => {
      this.orbit.enabled = !(e as unknown as { value: boolean }).value;
    });
    this.gizmo.addEventListener("objectChange", () => this.pullTransform());
    this.scene3.add(this.gizmo);

    canvas.addEventListener("pointerdown", (e) => this.pick(e));
    this.syncFromDraft();
    this.animate();
  }

  setGizmoMode(mode: GizmoMode): void {
    this.gizmo.setMode(mode);
  }

  /** Rebuild meshes from the draft (add/remove/import). */
  syncFromDraft(): void {
    for (const [id, mesh] of this.meshes) {
      if (!this.draft.primitives.some((p) => p.partId === id)) {
        this.scene3.remove(mesh);
        this.meshes.delete(id);
      }
    }
    for (const prim of this.draft.primitives) {
      let mesh = this.meshes.get(prim.partId);
      if (!mesh) {
        mesh = new THREE.Mesh(
          primitiveGeometry(prim.kind),
          new THREE.MeshStandardMaterial({
            color: PART_COLORS[prim.partId % PART_COLORS.length],
            roughness: 0.65,
          }),
        );
        mesh.userData.partId = prim.partId;
        this.scene3.add(mesh);
        this.meshes.set(prim.partId, mesh);
      }
      mesh.position.set(...prim.center);
      mesh.scale.set(...prim.halfExtents);
      const [w, x, y, z] = prim.rotation;
      mesh.quaternion.set(x, y, z, w);
      const selected = this.draft.selection.has(prim.partId);
      (mesh.material as THREE.MeshStandardMaterial).emissive.setHex(selected ? 0x5533aa : 0x000000);
    }
  }

  private pullTransform(): void {
    const obj = this.gizmo.object as THREE.Mesh | undefined;
    if (!obj) return;
    const partId = obj.userData.partId as number;
    const prim = this.draft.primitives.find((p) => p.partId === partId);
    if (!prim) return;
    prim.center = [obj.position.x, obj.position.y, obj.position.z];
    prim.halfExtents = [
      Math.max(Math.abs(obj.scale.x), 1e-3),
      Math.max(Math.abs(obj.scale.y), 1e-3),
      Math.max(Math.abs(obj.scale.z), 1e-3),
    ];
    prim.rotation = [obj.quaternion.w, obj.quaternion.x, obj.quaternion.y, obj.quaternion.z];
    this.callbacks.onTransform?.(partId);
  }

  private pick(event: PointerEvent): void {
    if ((this.gizmo as unknown as { dragging: boolean }).dragging) return;
    const rect = this.canvas.getBoundingClientRect();
    const ndc = new THREE.Vector2(
      ((event.clientX - rect.left) / rect.width) * 2 - 1,
      -((event.clientY - rect.top) / rect.height) * 2 + 1,
    );
    this.raycaster.setFromCamera(ndc, this.camera);
    const hits = this.raycaster.intersectObjects([...this.meshes.values()]);
    if (hits.length) {
      const partId = hits[0].object.userData.partId as number;
      this.gizmo.attach(hits[0].object);
      this.callbacks.onSelect?.(partId);
    } else {
      this.gizmo.detach();
      this.callbacks.onSelect?.(null);
    }
    this.syncFromDraft();
  }

  /** Current camera orbit in the generation convention. */
  orbitPose(): { azimuth: number; elevation: number; distance: number } {
    const offset = this.camera.position.clone().sub(this.orbit.target);
    const distance = offset.length();
    const elevation = (Math.asin(offset.y / distance) * 180) / Math.PI;
    const azimuth = ((Math.atan2(offset.x, offset.z) * 180) / Math.PI + 360) % 360;
    return { azimuth, elevation, distance };
  }

  private scheduleOrbitPreview(): void {
    if (this.orbitTimer) clearTimeout(this.orbitTimer);
    this.orbitTimer = setTimeout(() => {
      const { azimuth, elevation, distance } = this.orbitPose();
      this.callbacks.onOrbit?.(azimuth, elevation, distance);
    }, 120);
  }

  private animate = (): void => {
    requestAnimationFrame(this.animate);
    this.renderer.render(this.scene3, this.camera);
  };
}
