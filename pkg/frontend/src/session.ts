/**
 * Review session state machine.
 *
 * Owns the queue position, the editable mask buffer with its undo stack,
 * and the submit flow. The server is only ever touched by loading items and
 * by submit(); everything else is local. A stale-revision conflict reloads
 * the item and surfaces a "conflict" outcome so the view can notify the
 * reviewer without losing more than the unsubmitted buffer.
 */

import { ItemDetail, ItemStatus, PutResult, ReviewClient } from "./api.js";
import { MaskBuffer, PaintMode, Point } from "./maskBuffer.js";
import { base64ToBytes, bytesToBase64, decodePgm } from "./pgm.js";
import { UndoStack } from "./undoStack.js";

export type Decision = "accepted" | "edited" | "rejected";

export type LoadOutcome =
  | { kind: "item"; imageId: string }
  | { kind: "done" }                      // empty pending queue
  | { kind: "unreachable"; message: string };

export type SubmitOutcome =
  | { kind: "submitted"; revision: number }
  | { kind: "conflict"; message: string }  // reloaded; buffer reset
  | { kind: "invalid"; message: string }
  | { kind: "not-dirty" }                  // edited requires local changes
  | { kind: "no-item" };

export interface ViewState {
  currentItemId: string | null;
  overlayOpacity: number;
  brushRadius: number;
  mode: PaintMode;
  status: ItemStatus | null;
  revision: number | null;
  dirty: boolean;
  undoDepth: number;
}

export class EditSession {
  overlayOpacity = 0.45;
  brushRadius = 4;
  mode: PaintMode = "paint";

  private item: ItemDetail | null = null;
  private buffer: MaskBuffer | null = null;
  private imagePixels: Uint8Array | null = null;
  private imageSize: { width: number; height: number } | null = null;
  private undo = new UndoStack<MaskBuffer>(32);
  private dirty = false;
  private submitting = false;

  constructor(private client: ReviewClient) {}

  state(): ViewState {
    return {
      currentItemId: this.item?.image_id ?? null,
      overlayOpacity: this.overlayOpacity,
      brushRadius: this.brushRadius,
      mode: this.mode,
      status: this.item?.status ?? null,
      revision: this.item?.revision ?? null,
      dirty: this.dirty,
      undoDepth: this.undo.depth,
    };
  }

  maskBuffer(): MaskBuffer | null {
    return this.buffer;
  }

  image(): { width: number; height: number; pixels: Uint8Array } | null {
    if (!this.imageSize || !this.imagePixels) return null;
    return { ...this.imageSize, pixels: this.imagePixels };
  }

  /** Load the first pending item (or a specific one). */
  async fetchNext(imageId?: string): Promise<LoadOutcome> {
    try {
      let targetId = imageId;
      if (!targetId) {
        const pending = await this.client.listItems("pending");
        if (pending.length === 0) {
          this.item = null;
          this.buffer = null;
          this.dirty = false;
          this.undo.clear();
          return { kind: "done" };
        }
        targetId = pending[0].image_id;
      }
      const item = await this.client.getItem(targetId);
      this.loadItem(item);
      return { kind: "item", imageId: item.image_id };
    } catch (err) {
      return { kind: "unreachable", message: String(err) };
    }
  }

  private loadItem(item: ItemDetail): void {
    this.item = item;
    const img = decodePgm(base64ToBytes(item.image));
    this.imagePixels = img.pixels;
    this.imageSize = { width: img.width, height: img.height };
    this.buffer = MaskBuffer.fromPgmBytes(base64ToBytes(item.mask));
    this.undo.clear();
    this.dirty = false;
  }

  toggleEraser(): void {
    this.mode = this.mode === "paint" ? "erase" : "paint";
  }

  /** Apply one brush stroke; records the prior state for undo. */
  paint(points: Point[], mode?: PaintMode): void {
    if (!this.buffer || points.length === 0) return;
    const before = this.buffer.clone();
    this.buffer.paintStroke(points, this.brushRadius, mode ?? this.mode);
    if (this.buffer.equals(before)) {
      return; // erasing empty space etc. leaves no history entry
    }
    this.undo.push(before);
    this.dirty = true;
  }

  undoLast(): boolean {
    const prev = this.undo.pop();
    if (!prev || !this.buffer) return false;
    this.buffer = prev;
    this.dirty = this.undo.depth > 0;
    return true;
  }

  /** PUT the decision; "edited" sends the current buffer. */
  async submit(decision: Decision): Promise<SubmitOutcome> {
    if (!this.item || !this.buffer) return { kind: "no-item" };
    if (decision === "edited" && !this.dirty) return { kind: "not-dirty" };
    if (this.submitting) return { kind: "invalid", message: "submit in flight" };
    this.submitting = true;
    try {
      const mask = decision === "edited"
        ? bytesToBase64(this.buffer.toPgmBytes())
        : undefined;
      const result: PutResult = await this.client.putItem(
        this.item.image_id, decision, this.item.revision, mask);
      if (result.kind === "ok") {
        this.item.revision = result.revision;
        this.item.status = decision;
        this.dirty = false;
        this.undo.clear();
        return { kind: "submitted", revision: result.revision };
      }
      if (result.kind === "conflict") {
        // someone else won the race: reload their state, drop local edits
        await this.fetchNext(this.item.image_id);
        return { kind: "conflict", message: result.message };
      }
      return { kind: "invalid", message: result.message };
    } finally {
      this.submitting = false;
    }
  }
}
