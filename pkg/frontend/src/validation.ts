/** Validation comparison panel: measures to 3 significant figures, with
 * pre- and post-registration values side by side. */

import type { ApiClient } from './api.js';
import { ApiError } from './api.js';
import type { ValidationReport } from './types.js';

/** Format to 3 significant figures (alpha in mm, overlap dimensionless). */
export function formatMeasure(value: number | null | undefined): string {
  if (value === null || value === undefined || Number.isNaN(value)) {
    return 'n/a';
  }
  return Number(value).toPrecision(3);
}

export interface ComparePanel {
  available: boolean;
  hint?: string;
  alpha?: string;            // registered (minimized) alpha, mm
  alphaBefore?: string;      // identity-transform alpha, mm
  phi?: string;              // headline (unregistered) overlap
  phiRegistered?: string;
  classification?: string;
  report?: ValidationReport;
}

export function panelFromReport(report: ValidationReport): ComparePanel {
  return {
    available: true,
    alpha: formatMeasure(report.alpha_mm),
    alphaBefore: formatMeasure(report.alpha_before_mm),
    phi: formatMeasure(report.phi),
    phiRegistered: formatMeasure(report.phi_registered),
    classification: report.classification ?? undefined,
    report,
  };
}

export async function compareView(
  api: ApiClient, caseId: string, runId: string,
  hasSegmentedLesion: boolean,
): Promise<ComparePanel> {
  if (!hasSegmentedLesion) {
    return {
      available: false,
      hint: 'upload a segmented lesion volume to enable validation',
    };
  }
  try {
    const report = await api.validateRun(caseId, runId);
    return panelFromReport(report);
  } catch (err) {
    if (err instanceof ApiError && err.status === 422) {
      return { available: false, hint: 'empty lesion: no metrics' };
    }
    throw err;
  }
}
