/** Thin typed client for the planning service HTTP API.
 *
 * All case state flows through these endpoints; the client never touches
 * files directly. `fetchImpl` is injectable for tests.
 */

import type {
  CaseDoc, ComponentDef, ContourSet, JobStatus, Plane, ProbeSpec,
  RunRequestBody, ValidationReport,
} from './types.js';

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(`HTTP ${status}: ${message}`);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private base: string = '',
    private fetchImpl: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchImpl(this.base + path, init);
    if (!resp.ok) {
      throw new ApiError(resp.status, await resp.text());
    }
    return resp.json() as Promise<T>;
  }

  createCase(label: string): Promise<CaseDoc> {
    return this.request('/cases', {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ label }),
    });
  }

  getCase(caseId: string): Promise<CaseDoc> {
    return this.request(`/cases/${caseId}`);
  }

  async putProbes(caseId: string, probes: ProbeSpec[]): Promise<ProbeSpec[]> {
    const out = await this.request<{ probes: ProbeSpec[] }>(
      `/cases/${caseId}/probes`, {
        method: 'PUT',
        headers: { 'content-type': 'application/json' },
        body: JSON.stringify(probes),
      });
    return out.probes;
  }

  listComponents(family: 'models' | 'equipment' | 'organs' | 'protocols'):
      Promise<ComponentDef[]> {
    return this.request(`/cdm/${family}`);
  }

  startRun(caseId: string, body: RunRequestBody):
      Promise<{ job_id: string; run_id: string }> {
    return this.request(`/cases/${caseId}/runs`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    });
  }

  getJob(jobId: string): Promise<JobStatus> {
    return this.request(`/jobs/${jobId}`);
  }

  getContours(caseId: string, runId: string, plane: Plane, index: number,
              which: string = 'lesion'): Promise<ContourSet> {
    return this.request(
      `/cases/${caseId}/runs/${runId}/contours?plane=${plane}`
      + `&index=${index}&which=${which}`);
  }

  validateRun(caseId: string, runId: string): Promise<ValidationReport> {
    return this.request(`/cases/${caseId}/runs/${runId}/validate`,
                        { method: 'POST' });
  }

  /** URL of the server-rendered slice PNG; windowing is display-only, so
   * changing it only changes this URL, never case state. */
  sliceUrl(caseId: string, runId: string, plane: Plane, index: number,
           windowCenter: number, windowWidth: number,
           overlay?: 'lesion' | 'temp'): string {
    let url = `${this.base}/cases/${caseId}/runs/${runId}/slice`
      + `?plane=${plane}&index=${index}`
      + `&window=${windowCenter},${windowWidth}`;
    if (overlay) url += `&overlay=${overlay}`;
    return url;
  }
}
