import { describe, expect, it } from "vitest";

import { decodeRle, type RleMask } from "../src/rle.js";

describe("decodeRle", () => {
  it("matches a hand-decoded 4x4 fixture", () => {
    // Row 0: 0 0 1 1 | Row 1: 1 1 1 1 | Row 2: 0 2 2 0 | Row 3: 2 2 2 2
    const rle: RleMask = {
      height: 4,
      width: 4,
      rows: [
        [[0, 2], [1, 2]],
        [[1, 4]],
        [[0, 1], [2, 2], [0, 1]],
        [[2, 4]],
      ],
    };
    const expected = [0, 0, 1, 1, 1, 1, 1, 1, 0, 2, 2, 0, 2, 2, 2, 2];
    expect(Array.from(decodeRle(rle))).toEqual(expected);
  });

  it("decodes a single-run mask", () => {
    const rle: RleMask = { height: 2, width: 3, rows: [[[5, 3]], [[5, 3]]] };
    expect(Array.from(decodeRle(rle))).toEqual([5, 5, 5, 5, 5, 5]);
  });

  it("rejects rows whose runs do not cover the width", () => {
    const bad: RleMask = { height: 1, width: 4, rows: [[[0, 3]]] };
    expect(() => decodeRle(bad)).toThrow(/row 0/);
  });

  it("rejects rows whose runs overshoot the width", () => {
    const bad: RleMask = { height: 1, width: 2, rows: [[[0, 5]]] };
    expect(() => decodeRle(bad)).toThrow(/row 0/);
  });
});
