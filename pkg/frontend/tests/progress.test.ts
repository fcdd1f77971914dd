import { describe, expect, it } from 'vitest';

import { ApiClient } from '../src/api.js';
import { missingPromptedValues, runAndMonitor } from '../src/progress.js';
import { MockService } from './mock_service.js';

const instant = () => Promise.resolve();

describe('run launch and monitoring', () => {
  it('reaches 100% with non-decreasing progress on the fixture run', async () => {
    const service = new MockService({ progressTrail: [0.2, 0.5, 0.8, 1.0] });
    const api = new ApiClient('', service.fetch);
    const doc = await api.createCase('fixture');

    const seen: number[] = [];
    const outcome = await runAndMonitor(api, doc.id, {
      parameters: { applied_power: 25 },
    }, { sleep: instant, onUpdate: (p) => seen.push(p.fraction) });

    expect(outcome.state).toBe('done');
    expect(outcome.fraction).toBe(1);
    expect(outcome.runId).toBeDefined();
    const sorted = [...seen].sort((a, b) => a - b);
    expect(seen).toEqual(sorted);
    expect(seen[seen.length - 1]).toBe(1);
  });

  it('zero-duration protocols complete immediately', async () => {
    const service = new MockService({ progressTrail: [1.0] });
    const api = new ApiClient('', service.fetch);
    const doc = await api.createCase('instant');
    const outcome = await runAndMonitor(api, doc.id, {}, { sleep: instant });
    expect(outcome.state).toBe('done');
    expect(outcome.fraction).toBe(1);
  });

  it('renders 422 validation failures as a field error list', async () => {
    const service = new MockService({ missingPower: true });
    const api = new ApiClient('', service.fetch);
    const doc = await api.createCase('missing');
    const outcome = await runAndMonitor(api, doc.id, {}, { sleep: instant });
    expect(outcome.state).toBe('failed');
    expect(outcome.fieldErrors?.join(' ')).toContain('applied_power');
  });

  it('failed jobs surface the server error for the banner', async () => {
    const service = new MockService({ failJob: true });
    const api = new ApiClient('', service.fetch);
    const doc = await api.createCase('killed');
    const outcome = await runAndMonitor(api, doc.id, {
      parameters: { applied_power: 25 },
    }, { sleep: instant });
    expect(outcome.state).toBe('failed');
    expect(outcome.error).toBe('solver diverged');
    expect(outcome.jobId).toBeDefined();
  });
});

describe('prompted parameter gate', () => {
  it('lists unfilled prompted parameters', () => {
    expect(missingPromptedValues(['applied_power'], {}))
      .toEqual(['applied_power']);
    expect(missingPromptedValues(['applied_power'], { applied_power: 25 }))
      .toEqual([]);
    expect(missingPromptedValues(['a', 'b'], { a: 1, b: '' })).toEqual(['b']);
  });
});
