#ifndef CSI_FEEDBACK_H
#define CSI_FEEDBACK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CsiStatus {
  CSI_STATUS_OK = 0,
  CSI_STATUS_NULL_POINTER = 1,
  CSI_STATUS_INVALID_ARGUMENT = 2,
  CSI_STATUS_DIMENSION_MISMATCH = 3,
  CSI_STATUS_DEGENERATE = 4,
  CSI_STATUS_NUMERICAL = 5,
  CSI_STATUS_PARSE = 6,
  CSI_STATUS_IO = 7,
  CSI_STATUS_PANIC = 8,
} CsiStatus;

/**
 * Opaque quantizer handle.
 */
typedef struct CsiQuantizer CsiQuantizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next call into this library from the same thread.
 */
const char *csi_last_error_message(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void csi_string_free(char *s);

/**
 * Array response at `angle` (radians) for a ULA of `num_antennas`.
 *
 * # Safety
 * `out_re` and `out_im` must each hold `num_antennas` doubles.
 */
enum CsiStatus csi_steering_vector(double angle,
                                   size_t num_antennas,
                                   double spacing_ratio,
                                   double *out_re,
                                   double *out_im);

/**
 * Sum of `num_paths` rank-one path components.
 *
 * # Safety
 * Path arrays hold `num_paths` doubles; outputs hold `num_rx * num_tx`.
 */
enum CsiStatus csi_synthesize_channel(const double *aoa,
                                      const double *aod,
                                      const double *gain_re,
                                      const double *gain_im,
                                      size_t num_paths,
                                      size_t num_rx,
                                      size_t num_tx,
                                      double spacing_ratio,
                                      double *out_re,
                                      double *out_im);

/**
 * `||H - H_est||_F^2 / ||H||_F^2`.
 *
 * # Safety
 * Matrix arrays hold `num_rx * num_tx` doubles; `out` is writable.
 */
enum CsiStatus csi_nmse(const double *truth_re,
                        const double *truth_im,
                        const double *est_re,
                        const double *est_im,
                        size_t num_rx,
                        size_t num_tx,
                        double *out);

/**
 * Equal-width quantizer over the sample range. Free with
 * [`csi_quantizer_free`].
 *
 * # Safety
 * `samples` holds `len` doubles; `out` is writable.
 */
enum CsiStatus csi_quantizer_calibrate(const double *samples,
                                       size_t len,
                                       size_t num_levels,
                                       double dither_fraction,
                                       struct CsiQuantizer **out);

/**
 * # Safety
 * `json` is a NUL-terminated string; `out` is writable.
 */
enum CsiStatus csi_quantizer_from_json(const char *json, struct CsiQuantizer **out);

/**
 * Serialized quantizer record; free the string with [`csi_string_free`].
 *
 * # Safety
 * `q` is a live handle; `out` is writable.
 */
enum CsiStatus csi_quantizer_to_json(const struct CsiQuantizer *q, char **out);

/**
 * # Safety
 * `q` is a live handle or NULL.
 */
void csi_quantizer_free(struct CsiQuantizer *q);

/**
 * # Safety
 * `q` is a live handle; `out` is writable.
 */
enum CsiStatus csi_quantizer_num_levels(const struct CsiQuantizer *q, size_t *out);

/**
 * # Safety
 * `q` is a live handle; `out` is writable.
 */
enum CsiStatus csi_quantizer_dither_sigma(const struct CsiQuantizer *q, double *out);

/**
 * Cell index of `x + dither`.
 *
 * # Safety
 * `q` is a live handle; `out` is writable.
 */
enum CsiStatus csi_quantizer_quantize(const struct CsiQuantizer *q,
                                      double x,
                                      double dither,
                                      size_t *out);

/**
 * Probability that `x` plus dither lands in cell `index`.
 *
 * # Safety
 * `q` is a live handle; `out` is writable.
 */
enum CsiStatus csi_quantizer_cell_prob(const struct CsiQuantizer *q,
                                       size_t index,
                                       double x,
                                       double *out);

/**
 * Compresses and quantizes `H` with the compressor seeded by
 * `compressor_seed`; dither draws come from `dither_seed`. Writes the
 * payload record, to be freed with [`csi_string_free`].
 *
 * # Safety
 * Channel arrays hold `num_rx * num_tx` doubles; `q` is a live handle;
 * `out` is writable.
 */
enum CsiStatus csi_encode_scheme1(const double *h_re,
                                  const double *h_im,
                                  size_t num_rx,
                                  size_t num_tx,
                                  const struct CsiQuantizer *q,
                                  size_t measurements,
                                  uint64_t compressor_seed,
                                  uint64_t dither_seed,
                                  char **out);

/**
 * Recovers a `num_paths`-path channel from a payload record. The operator
 * is rebuilt from the payload seed. `solver_json` may be NULL for the
 * default solver settings.
 *
 * # Safety
 * Strings are NUL-terminated; `q` is a live handle; outputs hold
 * `num_rx * num_tx` doubles where the dimensions are those in the payload.
 */
enum CsiStatus csi_redeem_solve(const char *payload_json,
                                const struct CsiQuantizer *q,
                                size_t num_paths,
                                double spacing_ratio,
                                const char *solver_json,
                                double *out_re,
                                double *out_im);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSI_FEEDBACK_H */
