/**
 * CSS-space to image-space coordinate transforms for the annotation canvas.
 *
 * The canvas shows the image scaled by `zoom` and shifted by a pan offset
 * (in CSS pixels). The inverse transform must be exact so that a click on
 * a visual location always maps to the same image pixel regardless of zoom.
 */

export interface ViewTransform {
  zoom: number; // CSS pixels per image pixel
  panX: number; // CSS offset of image origin
  panY: number;
}

export interface ImagePoint {
  row: number;
  col: number;
}

/** Round half-down to a pixel index (2.5 -> 2). */
function roundHalfDown(x: number): number {
  return Math.ceil(x - 0.5) + 0; // + 0 normalizes Math.ceil's negative zero
}

/**
 * Map a CSS-space click to an image pixel, or null when the click falls
 * outside the image bounds.
 */
export function canvasToImage(
  xCss: number,
  yCss: number,
  view: ViewTransform,
  imageWidth: number,
  imageHeight: number,
): ImagePoint | null {
  const col = roundHalfDown((xCss - view.panX) / view.zoom);
  const row = roundHalfDown((yCss - view.panY) / view.zoom);
  if (row < 0 || row >= imageHeight || col < 0 || col >= imageWidth) {
    return null;
  }
  return { row, col };
}

/** CSS-space location of an image pixel's sample point under the current view. */
export function imageToCanvas(point: ImagePoint, view: ViewTransform): { x: number; y: number } {
  return {
    x: view.panX + point.col * view.zoom,
    y: view.panY + point.row * view.zoom,
  };
}
