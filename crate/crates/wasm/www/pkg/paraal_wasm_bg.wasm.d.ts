/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_mcdemo_free: (a: number, b: number) => void;
export const entropy_overestimation: (a: number, b: number) => [number, number, number, number];
export const mcdemo_mc_variance: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const mcdemo_new: (a: number) => [number, number, number];
export const mcdemo_test_items: (a: number) => number;
export const world_preview: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
