/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Slides every person along their viewing ray by N(0, sigma²) metres.
     */
    jitter(sigma: number, seed: bigint): string;
    /**
     * New crowd of `persons` people on a tilted ground plane.
     */
    constructor(persons: number, seed: bigint, pose_sigma: number);
    /**
     * Runs the crowd refinement for `iters` steps from the current state.
     */
    refine(iters: number): string;
    reset(): string;
    snapshot_json(): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_jitter: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly demo_new: (a: number, b: bigint, c: number) => [number, number, number];
    readonly demo_refine: (a: number, b: number) => [number, number, number, number];
    readonly demo_reset: (a: number) => [number, number, number, number];
    readonly demo_snapshot_json: (a: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
