/** Shared wire types for the planning service API. */

export type Vec3 = [number, number, number];

export type Plane = 'axial' | 'sagittal' | 'coronal';

export const PLANES: Plane[] = ['axial', 'sagittal', 'coronal'];

export interface VolumeMeta {
  dims: Vec3;      // voxels (nx, ny, nz)
  spacing: Vec3;   // mm
  origin: Vec3;    // mm, voxel-centre of index (0,0,0)
}

export interface ProbeSpec {
  tip: Vec3;        // mm
  direction: Vec3;  // unit
  kind: string;     // RFA | MWA | CRYO | IRE-electrode
  equipment_id: string;
}

export interface CaseDoc {
  id: string;
  label: string;
  probes: ProbeSpec[];
  volumes: Record<string, VolumeMeta>;
  runs: string[];
}

export type JobState = 'queued' | 'running' | 'done' | 'failed';

export interface JobStatus {
  id: string;
  case_id: string;
  state: JobState;
  progress: number;   // simulated-t fraction, 0..1
  error: string | null;
  run_id: string | null;
}

export interface ComponentParameter {
  name: string;
  kind: string;
  unit: string;
  value: number | string | boolean | null;
  prompt: boolean;
}

export interface ComponentDef {
  id: string;
  kind: string;
  tags: string[];
  parameters: ComponentParameter[];
  prompted: string[];
}

export interface ContourSet {
  plane: Plane;
  index: number;
  which: string;
  polylines: [number, number][][];  // mm in-plane coordinates
}

export interface ValidationReport {
  alpha_mm: number;
  alpha_before_mm: number;
  phi: number | null;
  phi_registered: number | null;
  classification: string | null;
  simulated_volume_ml?: number;
  segmented_volume_ml?: number;
}

export interface RunRequestBody {
  modality?: string;
  model?: string;
  organ?: string;
  protocol?: string;
  protocol_steps?: unknown[];
  parameters?: Record<string, number | string | boolean>;
  numerics?: Record<string, number | string>;
}
