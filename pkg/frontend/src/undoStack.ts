/** Bounded undo history; pushing beyond the cap drops the oldest state. */

export class UndoStack<T> {
  private states: T[] = [];

  constructor(readonly capacity: number = 32) {}

  push(state: T): void {
    this.states.push(state);
    if (this.states.length > this.capacity) {
      this.states.shift();
    }
  }

  pop(): T | undefined {
    return this.states.pop();
  }

  get depth(): number {
    return this.states.length;
  }

  clear(): void {
    this.states = [];
  }
}
