/* tslint:disable */
/* eslint-disable */

/**
 * CSV of parameters and FLOPs for all four variants of one input setting.
 */
export function cost_table(backbone_name: string, frames: number, size: number, tubelet_t: number, patch: number, classes: number): string;

/**
 * A `frames × 32 × 32` motion clip as row-major grey levels in [0, 1];
 * `direction` is 0 left, 1 right, 2 up, 3 down.
 */
export function motion_clip(direction: number, seed: bigint, reversed: boolean): Float32Array;

/**
 * For the token at `(t, h, w)` of an `nt × nh × nw` grid, one byte per
 * token: bit 0 set if it is attended in the spatial stage of `variant`,
 * bit 1 in the temporal stage. Model 1 sets both bits for every token.
 */
export function neighbourhood(variant: number, nt: number, nh: number, nw: number, t: number, h: number, w: number): Uint8Array;

/**
 * Label of the class a time-reversed clip of `direction` belongs to.
 */
export function reversed_label(direction: number): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly cost_table: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly motion_clip: (a: number, b: bigint, c: number) => [number, number, number, number];
    readonly neighbourhood: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly reversed_label: (a: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
