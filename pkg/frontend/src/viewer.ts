/** Tri-planar viewer state and overlay drawing.
 *
 * Slices are rendered server-side; the client keeps per-viewport state
 * (plane, slice index, window centre/width, overlay toggles) and draws
 * fetched contour polylines on top of the slice image. At most one slice
 * request is in flight per viewport; the latest request wins.
 */

import type { ApiClient } from './api.js';
import { planeMmToPixel, sliceCount } from './geometry.js';
import type { ContourSet, Plane, VolumeMeta } from './types.js';

export interface ViewportState {
  plane: Plane;
  sliceIndex: number;
  windowCenter: number;
  windowWidth: number;
  showLesion: boolean;
  showTemperature: boolean;
}

export function defaultViewport(plane: Plane): ViewportState {
  return {
    plane,
    sliceIndex: 0,
    windowCenter: 330,
    windowWidth: 60,
    showLesion: true,
    showTemperature: false,
  };
}

export function clampSlice(meta: VolumeMeta, state: ViewportState): number {
  const n = sliceCount(meta, state.plane);
  return Math.min(Math.max(state.sliceIndex, 0), n - 1);
}

export function stepSlice(meta: VolumeMeta, state: ViewportState,
                          delta: number): ViewportState {
  return { ...state, sliceIndex: clampSlice(meta, {
    ...state, sliceIndex: state.sliceIndex + delta }) };
}

export function setWindow(state: ViewportState, center: number,
                          width: number): ViewportState {
  if (width <= 0) {
    throw new Error('window width must be > 0');
  }
  return { ...state, windowCenter: center, windowWidth: width };
}

export function sliceRequestUrl(api: ApiClient, caseId: string, runId: string,
                                state: ViewportState): string {
  return api.sliceUrl(
    caseId, runId, state.plane, state.sliceIndex,
    state.windowCenter, state.windowWidth,
    state.showTemperature ? 'temp' : (state.showLesion ? 'lesion' : undefined));
}

/** Convert contour polylines (mm) to pixel-space paths for a canvas whose
 * pixels map 1:1 to slice pixels. */
export function contourPixelPaths(
  meta: VolumeMeta, contours: ContourSet,
): [number, number][][] {
  return contours.polylines.map((poly) =>
    poly.map(([mmU, mmV]) =>
      planeMmToPixel(meta, contours.plane, mmU, mmV)));
}

/** Latest-wins request guard: returns true when the given token is still
 * the most recent one for the viewport. */
export class LatestWins {
  private token = 0;

  next(): number {
    return ++this.token;
  }

  isCurrent(token: number): boolean {
    return token === this.token;
  }
}
