/**
 * Debounced, latest-wins request scheduling.
 *
 * `request()` marks the current state dirty; after `delayMs` of quiet the
 * perform callback runs. At most one request is in flight: further edits
 * queue exactly one follow-up, and a response is dropped whenever a newer
 * state is already queued, so the applied result always reflects the most
 * recent state that completed successfully.
 */

export class LatestWins<T> {
  private timer: ReturnType<typeof setTimeout> | null = null;
  private inFlight = false;
  private queued = false;
  private generation = 0;

  constructor(
    private readonly delayMs: number,
    private readonly perform: () => Promise<T>,
    private readonly onResult: (result: T) => void,
    private readonly onError: (error: unknown) => void = () => undefined,
  ) {}

  /** Schedule a (re)render for the current state, debounced. */
  request(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      this.fire();
    }, this.delayMs);
  }

  /** Cancel anything pending; in-flight responses will be discarded. */
  invalidate(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = null;
    this.queued = false;
    this.generation++;
  }

  get busy(): boolean {
    return this.inFlight;
  }

  private fire(): void {
    if (this.inFlight) {
      this.queued = true;
      return;
    }
    const myGeneration = ++this.generation;
    this.inFlight = true;
    this.perform()
      .then((result) => {
        // stale if superseded (newer edit queued) or invalidated
        if (myGeneration === this.generation && !this.queued) {
          this.onResult(result);
        }
      })
      .catch((error) => {
        if (myGeneration === this.generation && !this.queued) {
          this.onError(error);
        }
      })
      .finally(() => {
        this.inFlight = false;
        if (this.queued) {
          this.queued = false;
          this.fire();
        }
      });
  }
}
