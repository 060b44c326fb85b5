#ifndef KINHMD_H
#define KINHMD_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define KINHMD_MODE_DIRECT 0

#define KINHMD_MODE_INDIRECT 1

#define KINHMD_MODE_NONE 2

#define KINHMD_EVENT_ARM 0

#define KINHMD_EVENT_ENGAGE 1

#define KINHMD_EVENT_RELEASE 2

#define KINHMD_EVENT_KILL 3

#define KINHMD_EVENT_REARM 4

#define KINHMD_STATE_DISARMED 0

#define KINHMD_STATE_ARMED 1

#define KINHMD_STATE_ENGAGED 2

#define KINHMD_STATE_KILLED 3

#define KINHMD_TORQUE_FREE 0

#define KINHMD_TORQUE_CYLINDER 1

/**
 * Result of every call.
 */
typedef enum KinhmdStatus {
  KINHMD_STATUS_OK = 0,
  KINHMD_STATUS_NULL_POINTER = 1,
  KINHMD_STATUS_INVALID_ARGUMENT = 2,
  KINHMD_STATUS_INVALID_CONFIG = 3,
  /**
   * The device rejected a command; the kill switch has latched.
   */
  KINHMD_STATUS_HARD_FAULT = 4,
  KINHMD_STATUS_PARSE_ERROR = 5,
  /**
   * The packet holds no usable record for the requested channel map.
   */
  KINHMD_STATUS_NO_SAMPLE = 6,
  KINHMD_STATUS_IO = 7,
  KINHMD_STATUS_PANIC = 99,
} KinhmdStatus;

/**
 * Control loop with its simulated device.
 */
typedef struct KinhmdEngine KinhmdEngine;

/**
 * Thread-safe handle that kills an engine on its next tick.
 */
typedef struct KinhmdKillLatch KinhmdKillLatch;

/**
 * A parsed telemetry datagram.
 */
typedef struct KinhmdPacket KinhmdPacket;

/**
 * Engine settings. Fill with [`kinhmd_config_default`], then adjust.
 */
typedef struct KinhmdConfig {
  double tick_rate_hz;
  /**
   * One of `KINHMD_MODE_*`.
   */
  uint32_t cueing_mode;
  double gain;
  double torque_deadband_n;
  double force_limit_n;
  double jerk_limit_n_per_s;
  double fade_s;
  double head_mass_kg;
  double neck_stiffness_n_per_m;
  double neck_damping_n_s_per_m;
} KinhmdConfig;

typedef struct KinhmdVec3 {
  double x;
  double y;
  double z;
} KinhmdVec3;

/**
 * Output of one tick.
 */
typedef struct KinhmdWrench {
  struct KinhmdVec3 force;
  /**
   * One of `KINHMD_TORQUE_*`.
   */
  uint32_t torque_mode;
  /**
   * Free rotation axis when `torque_mode` is `KINHMD_TORQUE_CYLINDER`, else zero.
   */
  struct KinhmdVec3 axis;
  double timestamp;
} KinhmdWrench;

typedef struct KinhmdHead {
  struct KinhmdVec3 position;
  struct KinhmdVec3 velocity;
  /**
   * Unit quaternion, x y z w.
   */
  double orientation[4];
  struct KinhmdVec3 angular_velocity;
} KinhmdHead;

typedef struct KinhmdStimulus {
  double step_amplitude;
  double plateau_duration;
  double ease_duration;
} KinhmdStimulus;

typedef struct KinhmdDataRecord {
  uint32_t index;
  float values[8];
} KinhmdDataRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length plus
 * one, or 0 when there is no message. Pass a null `buf` to query the size.
 */
size_t kinhmd_last_error_message(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *kinhmd_version(void);

enum KinhmdStatus kinhmd_config_default(struct KinhmdConfig *out);

/**
 * Creates an engine in the DISARMED state. `*out` is left untouched on failure.
 */
enum KinhmdStatus kinhmd_engine_new(const struct KinhmdConfig *cfg, struct KinhmdEngine **out);

/**
 * Creates an engine from a TOML configuration file.
 */
enum KinhmdStatus kinhmd_engine_from_toml(const char *path, struct KinhmdEngine **out);

/**
 * Frees an engine. Null is ignored.
 */
void kinhmd_engine_free(struct KinhmdEngine *engine);

/**
 * Feeds one kill-switch event (`KINHMD_EVENT_*`). Events that do not apply
 * in the current state are ignored; read the state back to check.
 */
enum KinhmdStatus kinhmd_engine_event(struct KinhmdEngine *engine, uint32_t event);

/**
 * Writes the kill-switch state (`KINHMD_STATE_*`).
 */
enum KinhmdStatus kinhmd_engine_state(const struct KinhmdEngine *engine, uint32_t *out);

/**
 * Sets the gain, clamped to what the force limit allows. The gain actually
 * applied is written to `applied` when it is not null.
 */
enum KinhmdStatus kinhmd_engine_set_gain(struct KinhmdEngine *engine, double gain, double *applied);

enum KinhmdStatus kinhmd_engine_set_mode(struct KinhmdEngine *engine, uint32_t mode);

/**
 * Runs one control tick with vehicle acceleration `accel` (m/s²).
 * `feed_live` = 0 makes the safety chain fade the force out. On
 * `KINHMD_STATUS_HARD_FAULT` the engine has latched its kill switch.
 */
enum KinhmdStatus kinhmd_engine_tick(struct KinhmdEngine *engine,
                                     struct KinhmdVec3 accel,
                                     bool feed_live,
                                     struct KinhmdWrench *out);

enum KinhmdStatus kinhmd_engine_head(const struct KinhmdEngine *engine, struct KinhmdHead *out);

/**
 * Simulated time of the next tick, s. Returns NaN for a null engine.
 */
double kinhmd_engine_time(const struct KinhmdEngine *engine);

/**
 * Writes the tick log to `path` (JSON lines, gzip when the name ends in `.gz`).
 */
enum KinhmdStatus kinhmd_engine_export_log(const struct KinhmdEngine *engine, const char *path);

/**
 * A latch bound to `engine`, usable from another thread. It stays valid
 * after the engine is freed (triggering it then has no effect).
 */
enum KinhmdStatus kinhmd_engine_kill_latch(const struct KinhmdEngine *engine,
                                           struct KinhmdKillLatch **out);

/**
 * Requests a kill; the engine outputs zero force from its next tick on.
 */
enum KinhmdStatus kinhmd_kill_latch_trigger(const struct KinhmdKillLatch *latch);

void kinhmd_kill_latch_free(struct KinhmdKillLatch *latch);

enum KinhmdStatus kinhmd_stimulus_default(struct KinhmdStimulus *out);

/**
 * Pattern acceleration at `t` (0 ≤ t ≤ total duration), m/s².
 */
enum KinhmdStatus kinhmd_stimulus_eval(const struct KinhmdStimulus *pattern, double t, double *out);

/**
 * Parses a DATA datagram. `*out` is left untouched on failure.
 */
enum KinhmdStatus kinhmd_packet_parse(const uint8_t *bytes, size_t len, struct KinhmdPacket **out);

/**
 * Number of records, 0 for a null packet.
 */
size_t kinhmd_packet_record_count(const struct KinhmdPacket *packet);

enum KinhmdStatus kinhmd_packet_record(const struct KinhmdPacket *packet,
                                       size_t i,
                                       struct KinhmdDataRecord *out);

/**
 * Acceleration from record `record_index`, taking the three components from
 * value slots `slots[0..3]` and multiplying by `scale`. Returns
 * `KINHMD_STATUS_NO_SAMPLE` when the record is absent or not finite.
 */
enum KinhmdStatus kinhmd_packet_extract(const struct KinhmdPacket *packet,
                                        uint32_t record_index,
                                        const uint8_t *slots,
                                        double scale,
                                        struct KinhmdVec3 *out);

void kinhmd_packet_free(struct KinhmdPacket *packet);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KINHMD_H */
