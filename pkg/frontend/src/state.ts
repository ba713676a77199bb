/**
 * Editor state: one value per descriptor channel plus interpolation mode.
 *
 * The state is a pure function of the schema and user inputs; every write
 * path clamps to the ranges published by /api/info.
 */

import { BETA_DIM, CHANNEL_COUNT, ChannelSpec, MotionPayload } from "./types.js";

export interface InterpolationState {
  active: boolean;
  /** Snapshot of the slider values when interpolation was toggled on. */
  p1: number[] | null;
  alpha: number;
}

export interface EditorState {
  sourceId: string | null;
  values: number[]; // length 73, channel order of the service schema
  interpolation: InterpolationState;
  lastImage: string | null;
  lastLatencyMs: number | null;
  pending: boolean;
}

export function clampValue(spec: ChannelSpec, value: number): number {
  if (Number.isNaN(value)) return spec.default;
  return Math.min(spec.max, Math.max(spec.min, value));
}

export function initialValues(channels: ChannelSpec[]): number[] {
  const values = new Array<number>(CHANNEL_COUNT).fill(0);
  for (const spec of channels) values[spec.index] = spec.default;
  return values;
}

export function createState(channels: ChannelSpec[]): EditorState {
  return {
    sourceId: null,
    values: initialValues(channels),
    interpolation: { active: false, p1: null, alpha: 1.0 },
    lastImage: null,
    lastLatencyMs: null,
    pending: false,
  };
}

export function setChannel(state: EditorState, channels: ChannelSpec[], index: number,
                           value: number): void {
  const spec = channels[index];
  if (!spec || spec.index !== index) {
    throw new Error(`no channel with index ${index}`);
  }
  state.values[index] = clampValue(spec, value);
}

/** The grouped control drives every texture coefficient (beta 6..63) at once. */
export function setGroupedBeta(state: EditorState, channels: ChannelSpec[],
                               value: number): void {
  for (let i = 6; i < BETA_DIM; i++) {
    state.values[i] = clampValue(channels[i], value);
  }
}

export function toggleInterpolation(state: EditorState, active: boolean): void {
  if (active && !state.interpolation.active) {
    state.interpolation = { active: true, p1: state.values.slice(), alpha: 1.0 };
  } else if (!active) {
    state.interpolation = { active: false, p1: null, alpha: 1.0 };
  }
}

export function setAlpha(state: EditorState, alpha: number): void {
  state.interpolation.alpha = Math.min(1, Math.max(0, alpha));
}

export function motionFromValues(values: number[]): MotionPayload {
  if (values.length !== CHANNEL_COUNT) {
    throw new Error(`need ${CHANNEL_COUNT} channel values, got ${values.length}`);
  }
  return {
    beta: values.slice(0, BETA_DIM),
    rotation: values.slice(BETA_DIM, BETA_DIM + 3),
    translation: values.slice(BETA_DIM + 3, BETA_DIM + 6),
    crop: values.slice(BETA_DIM + 6, BETA_DIM + 9),
  };
}

export type RenderBody =
  | { source_id: string; motion: MotionPayload }
  | { source_id: string; p1: MotionPayload; p2: MotionPayload; alpha: number };

/** Body for the next render call: direct motion, or interpolation between
 * the snapshot (p1, shown at alpha = 1) and the current sliders (p2). */
export function renderBody(state: EditorState): RenderBody {
  if (state.sourceId === null) throw new Error("no source selected");
  if (state.interpolation.active && state.interpolation.p1 !== null) {
    return {
      source_id: state.sourceId,
      p1: motionFromValues(state.interpolation.p1),
      p2: motionFromValues(state.values),
      alpha: state.interpolation.alpha,
    };
  }
  return { source_id: state.sourceId, motion: motionFromValues(state.values) };
}
