/* tslint:disable */
/* eslint-disable */

/**
 * A normalized synthetic sequence held in browser memory.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Normalized precipitation at frame `t`, row-major.
     */
    frame(t: number): Float64Array;
    length(): number;
    /**
     * Rain mask of frame `t` at a normalized threshold, 1 for rain.
     */
    mask(t: number, threshold: number): Uint8Array;
    constructor(seed: number, size: number, length: number);
    /**
     * Persistence nowcast for `anchor + horizon`.
     */
    persistence(anchor: number, horizon: number): Float64Array;
    /**
     * Scores the persistence nowcast against the observed frame.
     */
    score(anchor: number, horizon: number, threshold: number): Float64Array;
    size(): number;
    /**
     * Wind components `[u, v]` in m/s at frame `t` (uniform over the grid).
     */
    wind(t: number): Float64Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_frame: (a: number, b: number) => [number, number, number, number];
    readonly demo_length: (a: number) => number;
    readonly demo_mask: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_new: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_persistence: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_score: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_size: (a: number) => number;
    readonly demo_wind: (a: number, b: number) => [number, number, number, number];
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
