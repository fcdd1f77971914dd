/** Run launch and monitoring: POST the run, poll the job until it settles,
 * surface progress as the simulated-time fraction.
 *
 * Prompted parameters must all be filled before launch; a 422 from the
 * service is converted into a field-annotated error list for the form.
 */

import type { ApiClient } from './api.js';
import { ApiError } from './api.js';
import type { JobStatus, RunRequestBody } from './types.js';

export interface RunProgress {
  state: 'validating' | 'queued' | 'running' | 'done' | 'failed';
  fraction: number;          // 0..1 of simulated time
  error?: string;
  fieldErrors?: string[];    // 422 validation failures
  jobId?: string;
  runId?: string;
}

export interface MonitorOptions {
  pollIntervalMs?: number;
  onUpdate?: (p: RunProgress) => void;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) =>
  new Promise<void>((resolve) => setTimeout(resolve, ms));

export function missingPromptedValues(
  prompted: string[], values: Record<string, unknown>,
): string[] {
  return prompted.filter(
    (name) => values[name] === undefined || values[name] === null
      || values[name] === '');
}

export async function runAndMonitor(
  api: ApiClient, caseId: string, body: RunRequestBody,
  options: MonitorOptions = {},
): Promise<RunProgress> {
  const poll = options.pollIntervalMs ?? 1000;
  const sleep = options.sleep ?? defaultSleep;
  const emit = (p: RunProgress) => {
    options.onUpdate?.(p);
    return p;
  };

  let started: { job_id: string; run_id: string };
  try {
    started = await api.startRun(caseId, body);
  } catch (err) {
    if (err instanceof ApiError && err.status === 422) {
      return emit({
        state: 'failed', fraction: 0,
        error: 'scenario validation failed',
        fieldErrors: splitFailureList(err.message),
      });
    }
    throw err;
  }

  let last: RunProgress = emit({
    state: 'queued', fraction: 0,
    jobId: started.job_id, runId: started.run_id,
  });
  for (;;) {
    const job: JobStatus = await api.getJob(started.job_id);
    // progress is non-decreasing on the server; keep the max anyway so a
    // UI bar can never move backwards
    const fraction = Math.max(last.fraction, job.progress);
    if (job.state === 'done') {
      return emit({ state: 'done', fraction: 1, jobId: job.id,
                    runId: started.run_id });
    }
    if (job.state === 'failed') {
      return emit({
        state: 'failed', fraction, jobId: job.id, runId: started.run_id,
        error: job.error ?? 'simulation failed',
      });
    }
    last = emit({
      state: job.state === 'queued' ? 'queued' : 'running',
      fraction, jobId: job.id, runId: started.run_id,
    });
    await sleep(poll);
  }
}

function splitFailureList(message: string): string[] {
  // the service sends either a JSON list of failure strings or plain text
  const body = message.replace(/^HTTP \d+:\s*/, '');
  try {
    const parsed = JSON.parse(body);
    if (typeof parsed === 'object' && parsed !== null && 'detail' in parsed) {
      const detail = (parsed as { detail: unknown }).detail;
      if (typeof detail === 'string') {
        try {
          const inner = JSON.parse(detail);
          if (Array.isArray(inner)) return inner.map(String);
        } catch {
          return [detail];
        }
      }
      if (Array.isArray(detail)) return detail.map(String);
    }
    if (Array.isArray(parsed)) return parsed.map(String);
  } catch {
    // fall through to plain text
  }
  return [body];
}
