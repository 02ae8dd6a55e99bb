/** Per-row run-length encoded masks as served by the backend. */

export interface RleMask {
  height: number;
  width: number;
  /** Per row: list of [class_id, run_length] pairs. */
  rows: [number, number][][];
}

export interface LegendEntry {
  class_id: number;
  name: string;
  color: [number, number, number];
}

/** Decode to a row-major class-id array. */
export function decodeRle(rle: RleMask): Int32Array {
  const out = new Int32Array(rle.height * rle.width);
  for (let r = 0; r < rle.height; r++) {
    let c = 0;
    for (const [value, length] of rle.rows[r]) {
      out.fill(value, r * rle.width + c, r * rle.width + c + length);
      c += length;
    }
    if (c !== rle.width) {
      throw new Error(`row ${r} decodes to ${c} pixels, expected ${rle.width}`);
    }
  }
  return out;
}
