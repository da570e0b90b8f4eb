#ifndef MMQVI_H
#define MMQVI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MmqStatus {
  MMQ_STATUS_OK = 0,
  MMQ_STATUS_NULL_POINTER = 1,
  MMQ_STATUS_INVALID_ARGUMENT = 2,
  MMQ_STATUS_OUT_OF_RANGE = 3,
  MMQ_STATUS_NUMERICAL_FAILURE = 4,
  MMQ_STATUS_SIMULATION_FAILURE = 5,
  MMQ_STATUS_BUFFER_TOO_SMALL = 6,
  MMQ_STATUS_PANIC = 7,
} MmqStatus;

// Opaque solved value function and policy.
typedef struct MmqSolution MmqSolution;

typedef struct MmqModelParams {
  double horizon;
  double tick;
  double base_intensity;
  double half_spread;
  double taker_fee;
  double mo_buy_rate;
  double mo_sell_rate;
  double mean_reversion;
  double signal_vol;
  double jump_up;
  double jump_down;
  double running_penalty;
  double terminal_penalty;
  int32_t inventory_cap;
  double alpha_cap;
} MmqModelParams;

typedef struct MmqGridSpec {
  size_t time_steps;
  // Odd, at least 3.
  size_t alpha_points;
} MmqGridSpec;

// `extrapolation`: 0 clamp, 1 linear. `verification`: 0 off, 1 per step, 2 exhaustive.
typedef struct MmqSolverOptions {
  double tolerance;
  size_t max_iter;
  uint32_t extrapolation;
  uint32_t verification;
} MmqSolverOptions;

typedef struct MmqControl {
  uint8_t ask;
  uint8_t bid;
  uint8_t market_order;
  // +1 buy, -1 sell; meaningful when `market_order` is 1.
  int8_t direction;
} MmqControl;

typedef struct MmqEstimate {
  size_t paths;
  double mean;
  double std_error;
  double predicted;
  double z_score;
} MmqEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Fills `out` with the reference parameters.
//
// # Safety
// `out` must be null or point to writable memory for one `MmqModelParams`.
enum MmqStatus mmq_default_params(struct MmqModelParams *out);

// # Safety
// `out` must be null or point to writable memory for one `MmqGridSpec`.
enum MmqStatus mmq_default_grid(struct MmqGridSpec *out);

// # Safety
// `out` must be null or point to writable memory for one `MmqSolverOptions`.
enum MmqStatus mmq_default_options(struct MmqSolverOptions *out);

// Solves backward from the horizon. On success `*out` owns a new handle.
//
// # Safety
// Pointer arguments must be null or valid; `options` may be null for defaults.
enum MmqStatus mmq_solve(const struct MmqModelParams *params,
                         const struct MmqGridSpec *grid,
                         const struct MmqSolverOptions *options,
                         struct MmqSolution **out);

// Releases a handle from [`mmq_solve`]. Null is ignored.
//
// # Safety
// `sol` must come from `mmq_solve` and not be used afterwards.
void mmq_solution_free(struct MmqSolution *sol);

// Time steps, alpha node count and inventory cap of a solution.
//
// # Safety
// `sol` must be a live handle; output pointers must be valid or null.
enum MmqStatus mmq_solution_dims(const struct MmqSolution *sol,
                                 size_t *time_steps,
                                 size_t *alpha_points,
                                 int32_t *inventory_cap);

// `v(t_level, alpha_index, q)`.
//
// # Safety
// `sol` must be a live handle and `out` valid.
enum MmqStatus mmq_value(const struct MmqSolution *sol,
                         size_t level,
                         size_t alpha_index,
                         int32_t q,
                         double *out);

// Copies the signal lattice into `buf` (length `alpha_points`).
//
// # Safety
// `buf` must hold `len` doubles.
enum MmqStatus mmq_alpha_nodes(const struct MmqSolution *sol, double *buf, size_t len);

// Copies a whole level, inventory-major then alpha ascending, into `buf`.
//
// # Safety
// `buf` must hold `len` doubles.
enum MmqStatus mmq_value_surface(const struct MmqSolution *sol,
                                 size_t level,
                                 double *buf,
                                 size_t len);

// Optimal control on `[t_level, t_{level+1})`.
//
// # Safety
// `sol` must be a live handle and `out` valid.
enum MmqStatus mmq_control(const struct MmqSolution *sol,
                           size_t level,
                           size_t alpha_index,
                           int32_t q,
                           struct MmqControl *out);

// Monte Carlo estimate of the performance from `(cash, price, alpha, q)` at time 0.
//
// # Safety
// `sol` must be a live handle and `out` valid.
enum MmqStatus mmq_estimate(const struct MmqSolution *sol,
                            double cash,
                            double price,
                            double alpha,
                            int32_t q,
                            size_t paths,
                            uint64_t seed,
                            struct MmqEstimate *out);

// Copies the calling thread's last error message, NUL terminated and
// truncated to fit. Returns the full message length plus one.
//
// # Safety
// `buf` must be null or hold `len` bytes.
size_t mmq_last_error(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMQVI_H */
