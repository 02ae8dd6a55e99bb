/** Render a decoded class mask to RGBA pixels for canvas compositing. */

import { decodeRle, type LegendEntry, type RleMask } from "./rle.js";

export interface OverlayOptions {
  /** Alpha applied to every painted pixel, in [0, 1]. */
  opacity: number;
  /** When set, pixels of this class are left fully transparent. */
  transparentClassId?: number;
}

/**
 * Build an RGBA buffer (height * width * 4) from a run-length mask and a
 * legend mapping class ids to colors. Suitable for ImageData.
 */
export function renderOverlay(rle: RleMask, legend: LegendEntry[], options: OverlayOptions): Uint8ClampedArray {
  if (options.opacity < 0 || options.opacity > 1) {
    throw new Error(`opacity must be in [0, 1], got ${options.opacity}`);
  }
  const colors = new Map<number, [number, number, number]>();
  for (const entry of legend) {
    colors.set(entry.class_id, entry.color);
  }
  const mask = decodeRle(rle);
  const alpha = Math.round(options.opacity * 255);
  const out = new Uint8ClampedArray(mask.length * 4);
  for (let i = 0; i < mask.length; i++) {
    const cid = mask[i];
    if (cid === options.transparentClassId) {
      continue; // leave alpha at 0
    }
    const color = colors.get(cid);
    if (color === undefined) {
      throw new Error(`class ${cid} missing from legend`);
    }
    out[i * 4] = color[0];
    out[i * 4 + 1] = color[1];
    out[i * 4 + 2] = color[2];
    out[i * 4 + 3] = alpha;
  }
  return out;
}
