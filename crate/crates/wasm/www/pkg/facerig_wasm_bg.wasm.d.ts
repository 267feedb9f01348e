/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_channels: (a: number) => [number, number];
export const demo_faces: (a: number) => [number, number];
export const demo_fit_noisy: (a: number, b: number, c: bigint) => [number, number, number, number];
export const demo_mesh: (a: number, b: number, c: number) => [number, number, number, number];
export const demo_new: (a: bigint, b: number, c: number) => [number, number, number];
export const interpolate: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const ramp: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
