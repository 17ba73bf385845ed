/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_jitter: (a: number, b: number, c: bigint) => [number, number, number, number];
export const demo_new: (a: number, b: bigint, c: number) => [number, number, number];
export const demo_refine: (a: number, b: number) => [number, number, number, number];
export const demo_reset: (a: number) => [number, number, number, number];
export const demo_snapshot_json: (a: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
