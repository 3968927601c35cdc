#ifndef AXISLINE_H
#define AXISLINE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a library call.
 */
typedef enum AxlStatus {
  AXL_STATUS_OK = 0,
  AXL_STATUS_NULL_POINTER = 1,
  AXL_STATUS_INVALID_UTF8 = 2,
  AXL_STATUS_INVALID_JSON = 3,
  AXL_STATUS_INVALID_ARGUMENT = 4,
  /**
   * A geometric precondition failed (degenerate line, point behind the camera, ...).
   */
  AXL_STATUS_GEOMETRY = 5,
  AXL_STATUS_INVALID_GRAPH = 6,
  AXL_STATUS_EMPTY_SCENE = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  AXL_STATUS_PANIC = 8,
} AxlStatus;

typedef enum AxlScenario {
  AXL_SCENARIO_FIXED = 0,
  AXL_SCENARIO_SMALL = 1,
  AXL_SCENARIO_LARGE = 2,
} AxlScenario;

typedef enum AxlParameterization {
  /**
   * Direction fixed, two positional scalars per line.
   */
  AXL_PARAMETERIZATION_TWO_P = 0,
  /**
   * Orthonormal representation, four scalars per line.
   */
  AXL_PARAMETERIZATION_FOUR_P = 1,
  /**
   * Inverse depth per line plus two scalars per shared axis.
   */
  AXL_PARAMETERIZATION_THREE_P = 2,
} AxlParameterization;

typedef enum AxlTermination {
  AXL_TERMINATION_ZERO_COST = 0,
  AXL_TERMINATION_COST_TOLERANCE = 1,
  AXL_TERMINATION_PARAM_TOLERANCE = 2,
  AXL_TERMINATION_MAX_ITERATIONS = 3,
  AXL_TERMINATION_DAMPING_EXHAUSTED = 4,
  AXL_TERMINATION_NON_FINITE = 5,
} AxlTermination;

/**
 * Factor graph. Opaque.
 */
typedef struct AxlGraph AxlGraph;

/**
 * Synthetic scene with ground truth. Opaque.
 */
typedef struct AxlScene AxlScene;

typedef struct AxlLmConfig {
  uint32_t max_iters;
  double initial_damping;
  double damping_up;
  double damping_down;
  double cost_tolerance;
  double param_tolerance;
  /**
   * Huber width in pixels; 0 disables the kernel.
   */
  double robust_width_px;
} AxlLmConfig;

/**
 * Accuracy of a solved graph against the scene it was built from.
 */
typedef struct AxlMetrics {
  double error_l;
  double trans_rmse;
} AxlMetrics;

typedef struct AxlReport {
  double initial_cost;
  double final_cost;
  uint32_t iterations;
  uint32_t accepted_steps;
  double wall_time_s;
  enum AxlTermination termination;
  bool diverged;
  /**
   * True when no accepted step raised the cost.
   */
  bool monotone;
  uint32_t line_params;
  uint32_t dropped_residuals;
} AxlReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *axl_version(void);

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *axl_last_error_message(void);

/**
 * Frees a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void axl_string_free(char *s);

struct AxlLmConfig axl_lm_config_default(void);

/**
 * Generates a scene. `config_json` holds a (possibly partial) scene
 * configuration; NULL uses the defaults.
 *
 * # Safety
 * `config_json` is NULL or a NUL-terminated string; `out` is writable.
 */
enum AxlStatus axl_scene_generate(const char *config_json,
                                  enum AxlScenario scenario,
                                  struct AxlScene **out);

/**
 * # Safety
 * `scene` is NULL or a handle from this library, freed at most once.
 */
void axl_scene_free(struct AxlScene *scene);

/**
 * Serializes a scene as JSON. Free the result with `axl_string_free`.
 *
 * # Safety
 * `scene` is a live handle; `out` is writable.
 */
enum AxlStatus axl_scene_to_json(const struct AxlScene *scene, char **out);

/**
 * Builds the initial factor graph of a scene for one line parameterization.
 *
 * # Safety
 * `scene` is a live handle; `out` is writable.
 */
enum AxlStatus axl_scene_build_graph(const struct AxlScene *scene,
                                     enum AxlParameterization param,
                                     struct AxlGraph **out);

/**
 * Line and camera position errors of `graph` against the scene's ground
 * truth. The graph must have been built from this scene.
 *
 * # Safety
 * `scene` and `graph` are live handles; `out` is writable.
 */
enum AxlStatus axl_scene_evaluate(const struct AxlScene *scene,
                                  const struct AxlGraph *graph,
                                  struct AxlMetrics *out);

/**
 * Parses a factor graph from JSON.
 *
 * # Safety
 * `json` is a NUL-terminated string; `out` is writable.
 */
enum AxlStatus axl_graph_from_json(const char *json, struct AxlGraph **out);

/**
 * Serializes a factor graph as JSON. Free the result with `axl_string_free`.
 *
 * # Safety
 * `graph` is a live handle; `out` is writable.
 */
enum AxlStatus axl_graph_to_json(const struct AxlGraph *graph, char **out);

/**
 * # Safety
 * `graph` is NULL or a handle from this library, freed at most once.
 */
void axl_graph_free(struct AxlGraph *graph);

/**
 * Robustified total cost at the current state.
 *
 * # Safety
 * `graph` is a live handle; `out_cost` is writable.
 */
enum AxlStatus axl_graph_cost(const struct AxlGraph *graph,
                              double robust_width_px,
                              double *out_cost);

/**
 * Runs Levenberg–Marquardt in place. `config` may be NULL for the
 * defaults and `report` may be NULL when the caller does not need it.
 *
 * # Safety
 * `graph` is a live handle; `config` and `report` are NULL or valid.
 */
enum AxlStatus axl_graph_solve(struct AxlGraph *graph,
                               const struct AxlLmConfig *config,
                               struct AxlReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AXISLINE_H */
