import { describe, expect, it } from 'vitest';

import { ApiClient } from '../src/api.js';
import type { ContourSet, VolumeMeta } from '../src/types.js';
import {
  LatestWins, clampSlice, contourPixelPaths, defaultViewport, setWindow,
  sliceRequestUrl, stepSlice,
} from '../src/viewer.js';

const META: VolumeMeta = {
  dims: [20, 20, 20], spacing: [2, 2, 2], origin: [0, 0, 0],
};

describe('viewport state', () => {
  it('clamps slice stepping to the volume', () => {
    let vp = defaultViewport('axial');
    vp = stepSlice(META, { ...vp, sliceIndex: 19 }, +5);
    expect(vp.sliceIndex).toBe(19);
    vp = stepSlice(META, { ...vp, sliceIndex: 0 }, -3);
    expect(vp.sliceIndex).toBe(0);
    expect(clampSlice(META, { ...vp, sliceIndex: 99 })).toBe(19);
  });

  it('windowing is display-only: it changes the request URL and nothing else', () => {
    const api = new ApiClient('');
    const vp = defaultViewport('axial');
    const a = sliceRequestUrl(api, 'c', 'r', vp);
    const b = sliceRequestUrl(api, 'c', 'r', setWindow(vp, 350, 20));
    expect(a).not.toBe(b);
    expect(b).toContain('window=350,20');
    expect(() => setWindow(vp, 300, 0)).toThrow();
  });

  it('converts mm contour polylines into pixel paths', () => {
    const contours: ContourSet = {
      plane: 'axial', index: 9, which: 'lesion',
      polylines: [[[18, 18], [22, 18], [22, 22]]],
    };
    const paths = contourPixelPaths(META, contours);
    expect(paths[0][0]).toEqual([9, 9]);
    expect(paths[0][1]).toEqual([11, 9]);
    expect(paths[0][2]).toEqual([11, 11]);
  });

  it('latest-wins cancellation keeps only the newest request', () => {
    const g = new LatestWins();
    const first = g.next();
    const second = g.next();
    expect(g.isCurrent(first)).toBe(false);
    expect(g.isCurrent(second)).toBe(true);
  });
});
