/** Wire types of the render service API. */

export interface ChannelSpec {
  index: number;
  name: string;
  group: string;
  min: number;
  max: number;
  default: number;
}

export interface ServiceInfo {
  window_len: number;
  image_size: number;
  z_dim: number;
  base_channels: number;
  feature_seed: number;
  channels: ChannelSpec[];
}

export interface MotionPayload {
  beta: number[];
  rotation: number[];
  translation: number[];
  crop: number[];
}

export interface RenderResponse {
  image: string; // base64 PNG
  latency_ms: number;
  warped?: string;
  flow_vis?: string;
}

export const BETA_DIM = 64;
export const CHANNEL_COUNT = 73;
