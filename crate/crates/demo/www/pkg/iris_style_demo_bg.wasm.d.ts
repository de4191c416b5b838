/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const __wbg_match_free: (a: number, b: number) => void;
export const __wbg_picture_free: (a: number, b: number) => void;
export const demo_eye: (a: number, b: number, c: number, d: number) => [number, number, number];
export const demo_identify: (a: number, b: number, c: number) => [number, number, number];
export const demo_iris: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const demo_new: (a: number, b: number, c: number) => [number, number, number];
export const demo_samples_per_user: (a: number) => number;
export const demo_users: (a: number) => number;
export const match_distances: (a: number) => [number, number];
export const match_predicted_user: (a: number) => number;
export const match_true_user: (a: number) => number;
export const picture_height: (a: number) => number;
export const picture_rgba: (a: number) => [number, number];
export const picture_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
