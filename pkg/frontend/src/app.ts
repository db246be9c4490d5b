/**
 * Browser wiring: canvas rendering, pointer strokes, keyboard shortcuts.
 *
 * Shortcuts: a = accept, r = reject, e = toggle erase, u / Ctrl+Z = undo,
 * Enter = submit edits, arrows = brush size. The mask renders as a
 * translucent single-hue tint over the radiograph so lung boundaries stay
 * judgeable under the overlay.
 */

import { ReviewClient } from "./api.js";
import { Point } from "./maskBuffer.js";
import { Decision, EditSession } from "./session.js";

const SCALE = 6; // display pixels per image pixel

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export function startApp(): void {
  const client = new ReviewClient("");
  const session = new EditSession(client);
  const canvas = el<HTMLCanvasElement>("canvas");
  const ctx = canvas.getContext("2d")!;
  const banner = el<HTMLDivElement>("banner");
  const status = el<HTMLDivElement>("status");

  let stroke: Point[] = [];
  let pointerDown = false;

  function notify(text: string, kind: "info" | "error" = "info"): void {
    banner.textContent = text;
    banner.className = kind;
    banner.style.display = text ? "block" : "none";
  }

  function render(): void {
    const image = session.image();
    const mask = session.maskBuffer();
    const view = session.state();
    if (!image || !mask) {
      ctx.clearRect(0, 0, canvas.width, canvas.height);
      status.textContent = "queue empty — all masks reviewed";
      return;
    }
    canvas.width = image.width * SCALE;
    canvas.height = image.height * SCALE;
    const frame = ctx.createImageData(canvas.width, canvas.height);
    const tint = { r: 64, g: 160, b: 255 };
    const alpha = view.overlayOpacity;
    for (let y = 0; y < canvas.height; y++) {
      const sy = Math.floor(y / SCALE);
      for (let x = 0; x < canvas.width; x++) {
        const sx = Math.floor(x / SCALE);
        const v = image.pixels[sy * image.width + sx];
        const on = mask.get(sx, sy) === 1;
        const i = (y * canvas.width + x) * 4;
        frame.data[i] = on ? v * (1 - alpha) + tint.r * alpha : v;
        frame.data[i + 1] = on ? v * (1 - alpha) + tint.g * alpha : v;
        frame.data[i + 2] = on ? v * (1 - alpha) + tint.b * alpha : v;
        frame.data[i + 3] = 255;
      }
    }
    ctx.putImageData(frame, 0, 0);
    status.textContent =
      `${view.currentItemId} · rev ${view.revision} · ${view.mode} ` +
      `r=${view.brushRadius}${view.dirty ? " · edited" : ""}`;
  }

  function canvasPoint(ev: MouseEvent): Point {
    const rect = canvas.getBoundingClientRect();
    return {
      x: (ev.clientX - rect.left) / SCALE,
      y: (ev.clientY - rect.top) / SCALE,
    };
  }

  canvas.addEventListener("mousedown", (ev) => {
    pointerDown = true;
    stroke = [canvasPoint(ev)];
  });
  canvas.addEventListener("mousemove", (ev) => {
    if (!pointerDown) return;
    stroke.push(canvasPoint(ev));
    session.paint(stroke.slice(-2));
    stroke = [stroke[stroke.length - 1]];
    render();
  });
  window.addEventListener("mouseup", () => {
    if (pointerDown && stroke.length) {
      session.paint(stroke);
      render();
    }
    pointerDown = false;
    stroke = [];
  });

  async function advance(): Promise<void> {
    const outcome = await session.fetchNext();
    if (outcome.kind === "unreachable") {
      notify(`service unreachable — retrying (${outcome.message})`, "error");
      setTimeout(advance, 2000);
      return;
    }
    notify("");
    render();
  }

  async function submit(decision: Decision): Promise<void> {
    const outcome = await session.submit(decision);
    switch (outcome.kind) {
      case "submitted":
        await advance();
        break;
      case "conflict":
        notify(`edited elsewhere — reloaded the current mask (${outcome.message})`,
               "error");
        render();
        break;
      case "invalid":
        notify(outcome.message, "error");
        break;
      case "not-dirty":
        notify("nothing painted yet — accept instead?", "error");
        break;
      case "no-item":
        break;
    }
  }

  window.addEventListener("keydown", (ev) => {
    if (ev.key === "a") void submit("accepted");
    else if (ev.key === "r") void submit("rejected");
    else if (ev.key === "Enter") void submit("edited");
    else if (ev.key === "e") { session.toggleEraser(); render(); }
    else if (ev.key === "u" || (ev.ctrlKey && ev.key === "z")) {
      session.undoLast();
      render();
    } else if (ev.key === "ArrowUp") {
      session.brushRadius = Math.min(16, session.brushRadius + 1);
      render();
    } else if (ev.key === "ArrowDown") {
      session.brushRadius = Math.max(1, session.brushRadius - 1);
      render();
    }
  });

  el<HTMLButtonElement>("accept").onclick = () => void submit("accepted");
  el<HTMLButtonElement>("reject").onclick = () => void submit("rejected");
  el<HTMLButtonElement>("save").onclick = () => void submit("edited");
  el<HTMLButtonElement>("undo").onclick = () => {
    session.undoLast();
    render();
  };

  void advance();
}

if (typeof document !== "undefined" && document.getElementById("canvas")) {
  startApp();
}
