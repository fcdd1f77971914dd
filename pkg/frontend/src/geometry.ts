/** Slice-plane geometry: pixel <-> mm mapping per viewing plane.
 *
 * Slice images are rendered by the server with pixel (u, v) equal to the
 * in-plane voxel indices:
 *   axial    u -> x, v -> y, slice index along z
 *   sagittal u -> y, v -> z, slice index along x
 *   coronal  u -> x, v -> z, slice index along y
 */

import type { Plane, Vec3, VolumeMeta } from './types.js';

/** (u axis, v axis, slice axis) as indices into (x, y, z). */
export const PLANE_AXES: Record<Plane, [number, number, number]> = {
  axial: [0, 1, 2],
  sagittal: [1, 2, 0],
  coronal: [0, 2, 1],
};

export function sliceCount(meta: VolumeMeta, plane: Plane): number {
  return meta.dims[PLANE_AXES[plane][2]];
}

export function sliceSize(meta: VolumeMeta, plane: Plane): [number, number] {
  const [ua, va] = PLANE_AXES[plane];
  return [meta.dims[ua], meta.dims[va]];
}

/** World mm position of pixel (u, v) on slice k of the given plane. */
export function pixelToMm(
  meta: VolumeMeta, plane: Plane, u: number, v: number, k: number,
): Vec3 {
  const [ua, va, ka] = PLANE_AXES[plane];
  const idx: Vec3 = [0, 0, 0];
  idx[ua] = u;
  idx[va] = v;
  idx[ka] = k;
  return [
    meta.origin[0] + idx[0] * meta.spacing[0],
    meta.origin[1] + idx[1] * meta.spacing[1],
    meta.origin[2] + idx[2] * meta.spacing[2],
  ];
}

/** Inverse of pixelToMm: nearest pixel (u, v) and slice k for a world point. */
export function mmToPixel(
  meta: VolumeMeta, plane: Plane, p: Vec3,
): { u: number; v: number; k: number } {
  const [ua, va, ka] = PLANE_AXES[plane];
  const idx = [
    (p[0] - meta.origin[0]) / meta.spacing[0],
    (p[1] - meta.origin[1]) / meta.spacing[1],
    (p[2] - meta.origin[2]) / meta.spacing[2],
  ];
  return {
    u: Math.round(idx[ua]),
    v: Math.round(idx[va]),
    k: Math.round(idx[ka]),
  };
}

/** Continuous (unrounded) in-plane mm coordinates of a world point, for
 * drawing overlays that the server provides in mm. */
export function mmToPlaneCoords(
  meta: VolumeMeta, plane: Plane, p: Vec3,
): [number, number] {
  const [ua, va] = PLANE_AXES[plane];
  return [p[ua], p[va]];
}

/** In-plane mm -> fractional pixel coordinates (for canvas drawing). */
export function planeMmToPixel(
  meta: VolumeMeta, plane: Plane, mmU: number, mmV: number,
): [number, number] {
  const [ua, va] = PLANE_AXES[plane];
  return [
    (mmU - meta.origin[ua]) / meta.spacing[ua],
    (mmV - meta.origin[va]) / meta.spacing[va],
  ];
}

export function insideVolume(meta: VolumeMeta, plane: Plane,
                             u: number, v: number, k: number): boolean {
  const [nu, nv] = sliceSize(meta, plane);
  return u >= 0 && u < nu && v >= 0 && v < nv
    && k >= 0 && k < sliceCount(meta, plane);
}
