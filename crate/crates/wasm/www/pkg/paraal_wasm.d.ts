/* tslint:disable */
/* eslint-disable */

/**
 * A small world, semantic space and bootstrap model, trained once when the
 * page asks for it.
 */
export class McDemo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Variance of `samples` dropout encodings of one test item at keep
     * probability `keep`, before and after denoising.
     */
    mc_variance(test_item: number, keep: number, samples: number): string;
    constructor(seed: number);
    test_items(): number;
}

/**
 * Raw beam entropy of `beam_json` (`[{"meaning": .., "probability": ..}]`)
 * next to the entropy after pooling the probability of each meaning.
 */
export function entropy_overestimation(beam_json: string): string;

/**
 * Scenes of a freshly generated world with their questions, answers and
 * every paraphrase of each answer.
 */
export function world_preview(seed: number, scenes: number, paraphrase_fraction: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_mcdemo_free: (a: number, b: number) => void;
    readonly entropy_overestimation: (a: number, b: number) => [number, number, number, number];
    readonly mcdemo_mc_variance: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly mcdemo_new: (a: number) => [number, number, number];
    readonly mcdemo_test_items: (a: number) => number;
    readonly world_preview: (a: number, b: number, c: number) => [number, number, number, number];
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
