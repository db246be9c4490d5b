/**
 * The editable mask: a width x height grid of 0/1 values.
 *
 * Painting stamps a disk of the brush radius at every point along the
 * stroke (consecutive points are connected so fast mouse moves leave no
 * gaps). Values are only ever set to 0 or 1, so the buffer stays binary
 * through any paint/erase sequence by construction.
 */

import { PgmImage, decodePgm, encodePgm } from "./pgm.js";

export type PaintMode = "paint" | "erase";

export interface Point {
  x: number;
  y: number;
}

export class MaskBuffer {
  readonly width: number;
  readonly height: number;
  readonly data: Uint8Array;

  constructor(width: number, height: number, data?: Uint8Array) {
    this.width = width;
    this.height = height;
    this.data = data ?? new Uint8Array(width * height);
    if (this.data.length !== width * height) {
      throw new Error(`buffer length ${this.data.length} != ${width}x${height}`);
    }
  }

  static fromPgm(img: PgmImage): MaskBuffer {
    const data = new Uint8Array(img.pixels.length);
    for (let i = 0; i < img.pixels.length; i++) {
      data[i] = img.pixels[i] >= 128 ? 1 : 0;
    }
    return new MaskBuffer(img.width, img.height, data);
  }

  toPgm(): PgmImage {
    const pixels = new Uint8Array(this.data.length);
    for (let i = 0; i < this.data.length; i++) {
      pixels[i] = this.data[i] ? 255 : 0;
    }
    return { width: this.width, height: this.height, pixels };
  }

  toPgmBytes(): Uint8Array {
    return encodePgm(this.toPgm());
  }

  static fromPgmBytes(bytes: Uint8Array): MaskBuffer {
    return MaskBuffer.fromPgm(decodePgm(bytes));
  }

  clone(): MaskBuffer {
    return new MaskBuffer(this.width, this.height, this.data.slice());
  }

  equals(other: MaskBuffer): boolean {
    if (other.width !== this.width || other.height !== this.height) return false;
    for (let i = 0; i < this.data.length; i++) {
      if (this.data[i] !== other.data[i]) return false;
    }
    return true;
  }

  get(x: number, y: number): number {
    return this.data[y * this.width + x];
  }

  isBinary(): boolean {
    for (const v of this.data) {
      if (v !== 0 && v !== 1) return false;
    }
    return true;
  }

  /** Stamp one disk; coordinates outside the canvas are clipped away. */
  stampDisk(cx: number, cy: number, radius: number, mode: PaintMode): void {
    const value = mode === "paint" ? 1 : 0;
    const r = Math.max(0, Math.floor(radius));
    const x0 = Math.max(0, Math.round(cx) - r);
    const x1 = Math.min(this.width - 1, Math.round(cx) + r);
    const y0 = Math.max(0, Math.round(cy) - r);
    const y1 = Math.min(this.height - 1, Math.round(cy) + r);
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - Math.round(cx);
        const dy = y - Math.round(cy);
        if (dx * dx + dy * dy <= r * r) {
          this.data[y * this.width + x] = value;
        }
      }
    }
  }

  /** Apply a brush stroke: disks along every segment of the point list. */
  paintStroke(points: Point[], radius: number, mode: PaintMode): void {
    if (points.length === 0) return;
    let prev = points[0];
    this.stampDisk(prev.x, prev.y, radius, mode);
    for (let i = 1; i < points.length; i++) {
      const cur = points[i];
      const steps = Math.max(
        1, Math.ceil(Math.hypot(cur.x - prev.x, cur.y - prev.y)));
      for (let s = 1; s <= steps; s++) {
        const t = s / steps;
        this.stampDisk(prev.x + t * (cur.x - prev.x),
                       prev.y + t * (cur.y - prev.y), radius, mode);
      }
      prev = cur;
    }
  }

  foregroundCount(): number {
    let n = 0;
    for (const v of this.data) n += v;
    return n;
  }
}
