#ifndef CAPDROP_H
#define CAPDROP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  CAPDROP_STATUS_OK = 0,
  CAPDROP_STATUS_NULL_POINTER = 1,
  CAPDROP_STATUS_INVALID_UTF8 = 2,
  CAPDROP_STATUS_INVALID_ARGUMENT = 3,
  CAPDROP_STATUS_CONFIG = 4,
  CAPDROP_STATUS_DOMAIN = 5,
  CAPDROP_STATUS_INVARIANT_VIOLATION = 6,
  CAPDROP_STATUS_ESTIMATION = 7,
  CAPDROP_STATUS_IO = 8,
  CAPDROP_STATUS_INTERNAL = 9,
  CAPDROP_STATUS_PANIC = 10,
} CapdropStatus;

/**
 * Opaque validated scenario.
 */
typedef struct CapdropScenario CapdropScenario;

/**
 * Opaque running simulation.
 */
typedef struct CapdropSimulation CapdropSimulation;

typedef struct {
  uint64_t t_clean[4];
  uint64_t t_release;
  uint64_t k;
  uint64_t t_round;
} CapdropSchedule;

typedef struct {
  double y;
  double sigma2;
  double demand_mean;
  double r_tilde;
  double r_tilde_ci;
  double a_max;
  double cond_ii_bound;
  double gamma_used;
  double rhs_iii;
  double kappa;
  double p;
  double p_prime;
  double beta;
  bool cond_i;
  bool cond_ii;
  bool cond_iii;
} CapdropTheoremReport;

/**
 * One step of plant, controller and estimator.
 */
typedef struct {
  uint64_t t;
  double x0;
  double l1;
  double q;
  double outflow;
  double a;
  double b;
  double b_s;
  double b_qs;
  double b_bq;
  uint64_t round;
  /**
   * NaN outside steering and release phases.
   */
  double x0_set;
  /**
   * NaN when ground truth is unavailable.
   */
  double e2norm;
  /**
   * A round finished on this step.
   */
  bool round_complete;
} CapdropStepRecord;

typedef struct {
  double alpha_hat;
  double f_max_hat;
  double r_hat;
  double eps_max_hat;
  uint64_t rounds;
} CapdropEstimates;

typedef struct {
  uint64_t steps;
  double time_avg_l1;
  double throughput;
  double delay_proxy_s;
  uint64_t rounds;
  /**
   * NaN when unavailable.
   */
  double tail_e2;
  double max_mass_residual;
  uint64_t clean_violations;
  uint64_t skipped_updates;
} CapdropRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *capdrop_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *capdrop_version(void);

/**
 * Parses a TOML scenario. Free the result with `capdrop_scenario_free`.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
CapdropStatus capdrop_scenario_from_toml(const char *toml, CapdropScenario **out_scenario);

/**
 * Reads and parses a TOML scenario file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
CapdropStatus capdrop_scenario_from_path(const char *path, CapdropScenario **out_scenario);

/**
 * Overrides the master seed.
 *
 * # Safety
 * `scenario` must come from a `capdrop_scenario_*` constructor.
 */
CapdropStatus capdrop_scenario_set_seed(CapdropScenario *scenario, uint64_t seed);

/**
 * # Safety
 * `scenario` must be NULL or come from a `capdrop_scenario_*` constructor,
 * and must not be used afterwards.
 */
void capdrop_scenario_free(CapdropScenario *scenario);

/**
 * # Safety
 * `scenario` must be a live handle and `out` a valid pointer.
 */
CapdropStatus capdrop_schedule(const CapdropScenario *scenario, CapdropSchedule *out_schedule);

/**
 * Noise-free discharge `f(x0)`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
CapdropStatus capdrop_flow_function(double alpha,
                                    double x0_clean,
                                    double x0_c,
                                    double r,
                                    double x0,
                                    double *out_value);

/**
 * Stationary bound on the expected squared normalized estimation error.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
CapdropStatus capdrop_error_bound_y(double lambda,
                                    double sigma2,
                                    double r,
                                    double alpha,
                                    double gap,
                                    double *out_value);

/**
 * Evaluates the stability conditions. `rollouts == 0` keeps the configured count.
 *
 * # Safety
 * `scenario` must be a live handle and `out` a valid pointer.
 */
CapdropStatus capdrop_check_theorem(const CapdropScenario *scenario,
                                    uint64_t rollouts,
                                    CapdropTheoremReport *out_report);

/**
 * # Safety
 * `scenario` must be a live handle and `out` a valid pointer. The
 * simulation keeps its own copy of the scenario.
 */
CapdropStatus capdrop_simulation_new(const CapdropScenario *scenario,
                                     uint64_t replication,
                                     CapdropSimulation **out_simulation);

/**
 * # Safety
 * `simulation` must be NULL or a live handle, and must not be used afterwards.
 */
void capdrop_simulation_free(CapdropSimulation *simulation);

/**
 * # Safety
 * `simulation` must be a live handle and `out` a valid pointer.
 */
CapdropStatus capdrop_simulation_step(CapdropSimulation *simulation, CapdropStepRecord *out_record);

/**
 * # Safety
 * `simulation` must be a live handle and `out` a valid pointer.
 */
CapdropStatus capdrop_simulation_estimates(const CapdropSimulation *simulation,
                                           CapdropEstimates *out_estimates);

/**
 * Runs one full replication without recording trajectories.
 *
 * # Safety
 * `scenario` must be a live handle and `out` a valid pointer.
 */
CapdropStatus capdrop_run(const CapdropScenario *scenario,
                          uint64_t replication,
                          CapdropRunSummary *out_summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAPDROP_H */
