/** DOM wiring: three slice viewports plus a metrics panel, probe placement,
 * prompted-parameter form, run launch with progress, validation display.
 * All logic lives in the imported modules; this file only touches the DOM.
 */

import { ApiClient } from './api.js';
import { mmToPixel, sliceCount } from './geometry.js';
import { ProbePlacementController } from './probes.js';
import { missingPromptedValues, runAndMonitor } from './progress.js';
import type {
  CaseDoc, ComponentDef, Plane, ProbeSpec, VolumeMeta,
} from './types.js';
import { compareView } from './validation.js';
import {
  LatestWins, ViewportState, clampSlice, contourPixelPaths, defaultViewport,
  sliceRequestUrl, stepSlice,
} from './viewer.js';

const api = new ApiClient('');

interface AppState {
  caseDoc: CaseDoc | null;
  meta: VolumeMeta | null;
  runId: string | null;
  viewports: Record<Plane, ViewportState>;
  placing: boolean;
}

const state: AppState = {
  caseDoc: null,
  meta: null,
  runId: null,
  viewports: {
    axial: defaultViewport('axial'),
    sagittal: defaultViewport('sagittal'),
    coronal: defaultViewport('coronal'),
  },
  placing: false,
};

const guards: Record<Plane, LatestWins> = {
  axial: new LatestWins(),
  sagittal: new LatestWins(),
  coronal: new LatestWins(),
};

let placement: ProbePlacementController | null = null;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function notice(text: string): void {
  el<HTMLDivElement>('notice').textContent = text;
}

async function refreshCase(caseId: string): Promise<void> {
  state.caseDoc = await api.getCase(caseId);
  const meta = state.caseDoc.volumes['organ'] ?? state.caseDoc.volumes['image'];
  if (meta) {
    state.meta = meta;
    placement = new ProbePlacementController(meta,
      (el<HTMLSelectElement>('probe-kind')).value,
      (el<HTMLInputElement>('equipment-id')).value);
    for (const plane of Object.keys(state.viewports) as Plane[]) {
      const vp = state.viewports[plane];
      vp.sliceIndex = Math.floor(sliceCount(meta, plane) / 2);
    }
  }
  renderProbeList();
  redrawAll();
}

function renderProbeList(): void {
  const list = el<HTMLUListElement>('probe-list');
  list.innerHTML = '';
  for (const p of state.caseDoc?.probes ?? []) {
    const li = document.createElement('li');
    li.textContent = `${p.kind} tip (${p.tip.map((x) => x.toFixed(1)).join(', ')}) mm`;
    list.appendChild(li);
  }
}

async function redraw(plane: Plane): Promise<void> {
  if (!state.meta || !state.caseDoc || !state.runId) return;
  const vp = state.viewports[plane];
  vp.sliceIndex = clampSlice(state.meta, vp);
  const canvas = el<HTMLCanvasElement>(`canvas-${plane}`);
  const ctx = canvas.getContext('2d');
  if (!ctx) return;
  const token = guards[plane].next();
  const img = new Image();
  img.onload = async () => {
    if (!guards[plane].isCurrent(token)) return;  // stale response
    canvas.width = img.width;
    canvas.height = img.height;
    ctx.drawImage(img, 0, 0);
    if (vp.showLesion && state.caseDoc && state.runId && state.meta) {
      try {
        const contours = await api.getContours(
          state.caseDoc.id, state.runId, plane, vp.sliceIndex);
        if (!guards[plane].isCurrent(token)) return;
        ctx.strokeStyle = '#ff4040';
        ctx.lineWidth = 1.5;
        for (const path of contourPixelPaths(state.meta, contours)) {
          ctx.beginPath();
          path.forEach(([x, y], i) =>
            i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y));
          ctx.stroke();
        }
      } catch {
        // no contours on this slice
      }
    }
    el<HTMLSpanElement>(`label-${plane}`).textContent =
      `${plane} ${vp.sliceIndex}`;
  };
  img.src = sliceRequestUrl(api, state.caseDoc.id, state.runId, vp);
}

function redrawAll(): void {
  (Object.keys(state.viewports) as Plane[]).forEach((p) => { void redraw(p); });
}

function wireViewport(plane: Plane): void {
  const canvas = el<HTMLCanvasElement>(`canvas-${plane}`);
  canvas.addEventListener('wheel', (ev) => {
    ev.preventDefault();
    if (!state.meta) return;
    state.viewports[plane] = stepSlice(state.meta, state.viewports[plane],
      ev.deltaY > 0 ? 1 : -1);
    void redraw(plane);
  });
  canvas.addEventListener('click', (ev) => {
    if (!state.placing || !placement || !state.meta || !state.caseDoc) return;
    const rect = canvas.getBoundingClientRect();
    const u = Math.round((ev.clientX - rect.left) * (canvas.width / rect.width));
    const v = Math.round((ev.clientY - rect.top) * (canvas.height / rect.height));
    const result = placement.click({
      plane, u, v, sliceIndex: state.viewports[plane].sliceIndex,
    });
    if (result.notice) notice(result.notice);
    if (result.phase === 'awaiting-entry') notice('now click the entry point');
    if (result.probe) {
      void submitProbe(result.probe);
    }
  });
}

async function submitProbe(probe: ProbeSpec): Promise<void> {
  if (!state.caseDoc) return;
  const existing = state.caseDoc.probes ?? [];
  await api.putProbes(state.caseDoc.id, [...existing, probe]);
  state.placing = false;
  notice('probe placed');
  await refreshCase(state.caseDoc.id);
}

async function renderParameterForm(): Promise<void> {
  const models = await api.listComponents('models');
  const select = el<HTMLSelectElement>('model-select');
  select.innerHTML = '';
  for (const m of models) {
    const opt = document.createElement('option');
    opt.value = m.id;
    opt.textContent = m.id;
    select.appendChild(opt);
  }
  const rebuild = () => {
    const model = models.find((m) => m.id === select.value);
    buildPromptedInputs(model);
  };
  select.onchange = rebuild;
  rebuild();
}

function buildPromptedInputs(model: ComponentDef | undefined): void {
  const form = el<HTMLDivElement>('prompted-params');
  form.innerHTML = '';
  for (const name of model?.prompted ?? []) {
    const label = document.createElement('label');
    label.textContent = `${name}: `;
    const input = document.createElement('input');
    input.type = 'number';
    input.dataset.param = name;
    label.appendChild(input);
    form.appendChild(label);
  }
}

function collectParameters(): Record<string, number> {
  const out: Record<string, number> = {};
  document.querySelectorAll<HTMLInputElement>('#prompted-params input')
    .forEach((input) => {
      if (input.value !== '' && input.dataset.param) {
        out[input.dataset.param] = Number(input.value);
      }
    });
  return out;
}

async function launchRun(): Promise<void> {
  if (!state.caseDoc) return;
  const models = await api.listComponents('models');
  const modelId = el<HTMLSelectElement>('model-select').value;
  const model = models.find((m) => m.id === modelId);
  const parameters = collectParameters();
  const missing = missingPromptedValues(model?.prompted ?? [], parameters);
  if (missing.length) {
    notice(`fill the prompted parameters first: ${missing.join(', ')}`);
    return;
  }
  const bar = el<HTMLProgressElement>('run-progress');
  const status = el<HTMLSpanElement>('run-status');
  const outcome = await runAndMonitor(api, state.caseDoc.id, {
    model: modelId, parameters,
  }, {
    pollIntervalMs: 1000,
    onUpdate: (p) => {
      bar.value = p.fraction;
      status.textContent = `${p.state} ${(p.fraction * 100).toFixed(0)}%`;
    },
  });
  if (outcome.state === 'failed') {
    status.textContent = 'failed';
    notice((outcome.fieldErrors ?? [outcome.error ?? 'run failed']).join('; '));
    return;
  }
  state.runId = outcome.runId ?? null;
  notice(outcome.runId
    ? `run ${outcome.runId} complete`
    : 'run complete');
  redrawAll();
}

async function showValidation(): Promise<void> {
  if (!state.caseDoc || !state.runId) return;
  const panel = await compareView(
    api, state.caseDoc.id, state.runId,
    'segmented-lesion' in (state.caseDoc.volumes ?? {}));
  const target = el<HTMLDivElement>('metrics');
  if (!panel.available) {
    target.textContent = panel.hint ?? 'validation unavailable';
    return;
  }
  target.innerHTML =
    `<table>
      <tr><th></th><th>before registration</th><th>after</th></tr>
      <tr><td>alpha (mm)</td><td>${panel.alphaBefore}</td><td>${panel.alpha}</td></tr>
      <tr><td>overlap</td><td>${panel.phi}</td><td>${panel.phiRegistered}</td></tr>
      <tr><td>reading</td><td colspan="2">${panel.classification ?? ''}</td></tr>
    </table>`;
}

export function start(): void {
  (['axial', 'sagittal', 'coronal'] as Plane[]).forEach(wireViewport);
  el<HTMLButtonElement>('btn-new-case').onclick = async () => {
    const doc = await api.createCase(
      el<HTMLInputElement>('case-label').value || 'unnamed');
    await refreshCase(doc.id);
    notice(`case ${doc.id} created; upload volumes via the API, then reload`);
  };
  el<HTMLButtonElement>('btn-load-case').onclick = async () => {
    await refreshCase(el<HTMLInputElement>('case-id').value.trim());
  };
  el<HTMLButtonElement>('btn-place-probe').onclick = () => {
    if (!placement) {
      notice('load a case with an organ or image volume first');
      return;
    }
    placement.setEquipment(
      el<HTMLSelectElement>('probe-kind').value,
      el<HTMLInputElement>('equipment-id').value);
    placement.reset();
    state.placing = true;
    notice('click the probe tip on any slice');
  };
  el<HTMLButtonElement>('btn-run').onclick = () => { void launchRun(); };
  el<HTMLButtonElement>('btn-validate').onclick = () => { void showValidation(); };
  document.querySelectorAll<HTMLInputElement>('input.window').forEach((inp) => {
    inp.onchange = () => {
      const center = Number(el<HTMLInputElement>('window-center').value);
      const width = Number(el<HTMLInputElement>('window-width').value);
      if (width <= 0) { notice('window width must be positive'); return; }
      for (const plane of Object.keys(state.viewports) as Plane[]) {
        state.viewports[plane] = {
          ...state.viewports[plane],
          windowCenter: center, windowWidth: width,
        };
      }
      redrawAll();
    };
  });
  void renderParameterForm();
}

// entry point when loaded as a module in the browser
if (typeof document !== 'undefined' && document.readyState !== 'loading') {
  start();
} else if (typeof document !== 'undefined') {
  document.addEventListener('DOMContentLoaded', start);
}

// re-exported for tests and console experiments
export { api, mmToPixel, state };
