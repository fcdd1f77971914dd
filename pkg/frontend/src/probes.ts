/** Two-click virtual probe placement.
 *
 * First click sets the tip, second sets the entry point; the direction is
 * normalize(tip - entry). The tip depth comes from the active slice plane.
 * Clicks outside the image are ignored with a visible notice; a second
 * click on the tip itself is rejected (zero-length direction) and the
 * controller keeps waiting for a usable entry point.
 */

import { insideVolume, pixelToMm } from './geometry.js';
import type { Plane, ProbeSpec, Vec3, VolumeMeta } from './types.js';

export type PlacementPhase = 'idle' | 'awaiting-entry';

export interface ClickEvent {
  plane: Plane;
  u: number;
  v: number;
  sliceIndex: number;
}

export interface PlacementResult {
  probe?: ProbeSpec;
  notice?: string;
  phase: PlacementPhase;
}

function norm(v: Vec3): number {
  return Math.hypot(v[0], v[1], v[2]);
}

export class ProbePlacementController {
  phase: PlacementPhase = 'idle';
  private tip: Vec3 | null = null;

  constructor(
    private meta: VolumeMeta,
    private kind: string = 'RFA',
    private equipmentId: string = '',
  ) {}

  setEquipment(kind: string, equipmentId: string): void {
    this.kind = kind;
    this.equipmentId = equipmentId;
  }

  reset(): void {
    this.phase = 'idle';
    this.tip = null;
  }

  click(ev: ClickEvent): PlacementResult {
    if (!insideVolume(this.meta, ev.plane, ev.u, ev.v, ev.sliceIndex)) {
      return { notice: 'click outside the image ignored', phase: this.phase };
    }
    const p = pixelToMm(this.meta, ev.plane, ev.u, ev.v, ev.sliceIndex);
    if (this.phase === 'idle') {
      this.tip = p;
      this.phase = 'awaiting-entry';
      return { phase: this.phase };
    }
    const tip = this.tip as Vec3;
    const d: Vec3 = [tip[0] - p[0], tip[1] - p[1], tip[2] - p[2]];
    const n = norm(d);
    if (n < 1e-9) {
      return {
        notice: 'entry point equals the tip; pick a different entry point',
        phase: this.phase,
      };
    }
    const probe: ProbeSpec = {
      tip,
      direction: [d[0] / n, d[1] / n, d[2] / n],
      kind: this.kind,
      equipment_id: this.equipmentId,
    };
    this.reset();
    return { probe, phase: this.phase };
  }
}
