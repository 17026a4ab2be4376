#include "falldet/falldet.h"

#include <cstring>
#include <string>

#include "falldet/run.hpp"

struct fd_model {
  falldet::Model model;
};

namespace {

thread_local std::string last_error;

fd_status fail(fd_status status, std::string message) {
  last_error = std::move(message);
  return status;
}

fd_status from_exception(const std::exception& e) {
  return fail(static_cast<fd_status>(falldet::classify(e).exit_code), e.what());
}

template <typename F>
fd_status guarded(F&& f) {
  try {
    last_error.clear();
    return f();
  } catch (const nlohmann::json::exception& e) {
    return fail(FD_ERR_CONFIG, std::string("malformed JSON: ") + e.what());
  } catch (const std::exception& e) {
    return from_exception(e);
  } catch (...) {
    return fail(FD_ERR_INTERNAL, "unknown error");
  }
}

falldet::RunConfig parse_config(const char* config_json) {
  if (!config_json) throw falldet::ConfigError("null configuration");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(config_json);
  } catch (const nlohmann::json::parse_error& e) {
    throw falldet::ConfigError(std::string("configuration is not valid JSON: ") + e.what());
  }
  return falldet::run_config_from_json(j);
}

}  // namespace

extern "C" {

const char* fd_version(void) {
  static const std::string v = falldet::version();
  return v.c_str();
}

const char* fd_status_name(fd_status status) {
  switch (status) {
    case FD_OK: return "ok";
    case FD_ERR_CONFIG: return "config";
    case FD_ERR_DATA: return "data";
    case FD_ERR_TRAINING: return "training";
    default: return "internal";
  }
}

const char* fd_last_error(void) { return last_error.c_str(); }

fd_status fd_run(const char* config_json, fd_log_fn log, void* user) {
  return guarded([&] {
    const auto config = parse_config(config_json);
    falldet::LogFn sink;
    if (log) sink = [log, user](std::string_view line) { log(std::string(line).c_str(), user); };
    const auto outcome = falldet::run_command(config, sink);
    if (outcome.exit_code != 0) return fail(static_cast<fd_status>(outcome.exit_code), "every fold failed");
    return FD_OK;
  });
}

fd_status fd_resolve_config(const char* config_json, char* buf, size_t size, size_t* needed) {
  return guarded([&] {
    const auto config = parse_config(config_json);
    config.validate();
    const std::string text = falldet::run_config_to_json(config).dump(2);
    if (needed) *needed = text.size() + 1;
    if (buf && size > 0) {
      const size_t n = std::min(size - 1, text.size());
      std::memcpy(buf, text.data(), n);
      buf[n] = '\0';
    }
    return FD_OK;
  });
}

fd_status fd_model_create(const char* variant, size_t window, uint64_t seed, fd_model** out) {
  return guarded([&] {
    if (!variant || !out) return fail(FD_ERR_CONFIG, "null argument");
    falldet::ModelSpec spec;
    spec.variant = falldet::parse_variant(variant);
    spec.window = window;
    *out = new fd_model{falldet::Model::build(spec, seed)};
    (*out)->model.freeze();
    return FD_OK;
  });
}

fd_status fd_model_load(const char* path, fd_model** out) {
  return guarded([&] {
    if (!path || !out) return fail(FD_ERR_CONFIG, "null argument");
    *out = new fd_model{falldet::load_checkpoint(path)};
    (*out)->model.freeze();
    return FD_OK;
  });
}

fd_status fd_model_save(const fd_model* model, const char* path) {
  return guarded([&] {
    if (!model || !path) return fail(FD_ERR_CONFIG, "null argument");
    falldet::save_checkpoint(model->model, path);
    return FD_OK;
  });
}

void fd_model_free(fd_model* model) { delete model; }

size_t fd_model_param_count(const fd_model* model) { return model ? model->model.param_count() : 0; }

size_t fd_model_window(const fd_model* model) { return model ? model->model.spec().window : 0; }

fd_status fd_model_flops(const fd_model* model, size_t steps, uint64_t* out) {
  return guarded([&] {
    if (!model || !out) return fail(FD_ERR_CONFIG, "null argument");
    *out = model->model.flops(steps).total();
    return FD_OK;
  });
}

fd_status fd_model_predict(fd_model* model, const double* acc, const double* gyro, size_t n, size_t steps,
                           double* probs) {
  return guarded([&] {
    if (!model || !acc || !gyro || !probs) return fail(FD_ERR_CONFIG, "null argument");
    const size_t count = n * steps * 4;
    falldet::Tensor a({n, steps, 4}, std::vector<double>(acc, acc + count));
    falldet::Tensor g({n, steps, 4}, std::vector<double>(gyro, gyro + count));
    const auto p = model->model.predict(a, g);
    std::copy(p.begin(), p.end(), probs);
    return FD_OK;
  });
}

fd_status fd_metrics_compute(const double* probs, const int* labels, size_t n, double threshold, fd_metrics* out) {
  return guarded([&] {
    if (!probs || !labels || !out) return fail(FD_ERR_CONFIG, "null argument");
    const auto m = falldet::metrics(std::span(probs, n), std::span(labels, n), threshold);
    *out = {m.precision,     m.recall,       m.f1,        m.accuracy,     m.fall.precision,
            m.fall.recall,   m.fall.f1,      m.counts.tp, m.counts.fp,    m.counts.tn,
            m.counts.fn};
    return FD_OK;
  });
}

fd_status fd_class_weights(const int* labels, size_t n, double* w0, double* w1) {
  return guarded([&] {
    if (!labels || !w0 || !w1) return fail(FD_ERR_CONFIG, "null argument");
    const auto w = falldet::class_weights(std::span(labels, n));
    *w0 = w.w0;
    *w1 = w.w1;
    return FD_OK;
  });
}

}  // extern "C"
