import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { LatestWins } from "../src/latestWins.js";

describe("LatestWins", () => {
  beforeEach(() => {
    vi.useFakeTimers();
  });
  afterEach(() => {
    vi.useRealTimers();
  });

  it("collapses a quiet burst into one request", async () => {
    const calls: number[] = [];
    let state = 0;
    const lw = new LatestWins<number>(
      100,
      async () => {
        calls.push(state);
        return state;
      },
      () => undefined,
    );
    for (let i = 0; i < 10; i++) {
      state = i;
      lw.request();
      vi.advanceTimersByTime(10); // edits 10 ms apart, inside the window
    }
    await vi.advanceTimersByTimeAsync(150);
    expect(calls).toEqual([9]); // only the final state was requested
  });

  it("issues at most two requests for a burst over a slow response", async () => {
    const calls: number[] = [];
    const applied: number[] = [];
    let state = 0;
    let release: (() => void) | null = null;
    const lw = new LatestWins<number>(
      100,
      () =>
        new Promise<number>((resolve) => {
          const snapshot = state;
          calls.push(snapshot);
          release = () => resolve(snapshot);
        }),
      (result) => applied.push(result),
    );
    state = 1;
    lw.request();
    await vi.advanceTimersByTimeAsync(100); // first request goes out
    expect(calls).toEqual([1]);
    for (let i = 2; i <= 10; i++) {
      state = i;
      lw.request();
      await vi.advanceTimersByTimeAsync(30); // edits keep arriving mid-flight
    }
    release!(); // first response lands while the burst's debounce is pending
    await vi.advanceTimersByTimeAsync(100); // quiet period: final state dispatches
    release!(); // second response lands
    await vi.advanceTimersByTimeAsync(1);
    expect(calls.length).toBeLessThanOrEqual(2);
    expect(calls).toEqual([1, 10]);
    expect(applied[applied.length - 1]).toBe(10); // final display is the final state
  });

  it("drops an in-flight response when a newer dispatch is already queued", async () => {
    const applied: number[] = [];
    let state = 0;
    const resolvers: Array<(v: number) => void> = [];
    const snapshots: number[] = [];
    const lw = new LatestWins<number>(
      10,
      () =>
        new Promise<number>((resolve) => {
          snapshots.push(state);
          resolvers.push(resolve);
        }),
      (r) => applied.push(r),
    );
    state = 1;
    lw.request();
    await vi.advanceTimersByTimeAsync(10); // dispatch for state 1
    state = 2;
    lw.request();
    await vi.advanceTimersByTimeAsync(10); // debounce fires mid-flight -> queued
    resolvers[0](snapshots[0]); // stale response: must be discarded
    await vi.advanceTimersByTimeAsync(1); // queued dispatch for state 2 goes out
    resolvers[1](snapshots[1]);
    await vi.advanceTimersByTimeAsync(1);
    expect(applied).toEqual([2]);
  });

  it("reports errors for the latest request only", async () => {
    const errors: unknown[] = [];
    const lw = new LatestWins<number>(
      50,
      () => Promise.reject(new Error("boom")),
      () => undefined,
      (e) => errors.push(e),
    );
    lw.request();
    await vi.advanceTimersByTimeAsync(60);
    expect(errors).toHaveLength(1);
  });

  it("invalidate() drops queued work and in-flight results", async () => {
    const applied: number[] = [];
    let release: (() => void) | null = null;
    const lw = new LatestWins<number>(
      10,
      () =>
        new Promise<number>((resolve) => {
          release = () => resolve(42);
        }),
      (r) => applied.push(r),
    );
    lw.request();
    await vi.advanceTimersByTimeAsync(10);
    lw.invalidate();
    release!();
    await vi.advanceTimersByTimeAsync(1);
    expect(applied).toEqual([]);
  });
});
