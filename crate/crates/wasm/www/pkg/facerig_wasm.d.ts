/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    channels(): string[];
    /**
     * Flat `[i0, j0, k0, i1, ...]` triangle indices.
     */
    faces(): Uint32Array;
    /**
     * Renders landmarks for a random expression and pose, perturbs them
     * with Gaussian pixel noise and fits them back.
     */
    fit_noisy(noise: number, seed: bigint): string;
    /**
     * Flat xyz vertex positions of the rig under `alpha`.
     */
    mesh(alpha: Float64Array): Float64Array;
    /**
     * Synthetic model with `vertices` vertices and a `k`-channel rig.
     */
    constructor(seed: bigint, vertices: number, k: number);
}

/**
 * Interpolates a single-channel curve between the given keyframes.
 */
export function interpolate(values: Float64Array, keyframes: Uint32Array): Float64Array;

/**
 * Neutral → peak → neutral curve for a single-channel peak value.
 */
export function ramp(peak: number, frames: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_channels: (a: number) => [number, number];
    readonly demo_faces: (a: number) => [number, number];
    readonly demo_fit_noisy: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly demo_mesh: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_new: (a: bigint, b: number, c: number) => [number, number, number];
    readonly interpolate: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly ramp: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_drop_slice: (a: number, b: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
