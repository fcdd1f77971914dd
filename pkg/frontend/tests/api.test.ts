import { describe, expect, it } from 'vitest';

import { ApiClient, ApiError } from '../src/api.js';
import type { ProbeSpec } from '../src/types.js';
import { MockService } from './mock_service.js';

describe('probe placement round trip through the API', () => {
  it('PUT then GET returns the identical probe list', async () => {
    const service = new MockService();
    const api = new ApiClient('', service.fetch);
    const doc = await api.createCase('roundtrip');

    const probes: ProbeSpec[] = [{
      tip: [19.0, 19.0, 19.0],
      direction: [0, 0, 1],
      kind: 'RFA',
      equipment_id: 'rfa-umbrella-9',
    }];
    const placed = await api.putProbes(doc.id, probes);
    expect(placed).toEqual(probes);

    const reloaded = await api.getCase(doc.id);
    expect(reloaded.probes).toEqual(probes);
  });

  it('never mutates case state except through documented endpoints', async () => {
    const service = new MockService();
    const api = new ApiClient('', service.fetch);
    const doc = await api.createCase('audit');
    await api.putProbes(doc.id, []);
    await api.getCase(doc.id);
    // request log: every mutation is a POST/PUT on a documented path
    const mutations = service.requests.filter((r) => r.method !== 'GET');
    expect(mutations).toEqual([
      { method: 'POST', path: '/cases' },
      { method: 'PUT', path: `/cases/${doc.id}/probes` },
    ]);
  });

  it('surfaces HTTP errors as ApiError with status', async () => {
    const service = new MockService();
    const api = new ApiClient('', service.fetch);
    await expect(api.getCase('missing')).rejects.toThrowError(ApiError);
    await expect(api.getCase('missing')).rejects.toMatchObject({ status: 404 });
  });

  it('builds slice URLs with windowing as query-only state', () => {
    const api = new ApiClient('http://svc', (async () => new Response()) as never);
    const url = api.sliceUrl('c1', 'r1', 'coronal', 12, 330, 60, 'lesion');
    expect(url).toBe(
      'http://svc/cases/c1/runs/r1/slice?plane=coronal&index=12'
      + '&window=330,60&overlay=lesion');
  });
});
