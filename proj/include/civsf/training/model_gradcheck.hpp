#pragma once

#include <cstdint>

#include "civsf/data/datamodel.hpp"
#include "civsf/model/model.hpp"
#include "civsf/numerics/gradcheck.hpp"
#include "civsf/synthworld.hpp"

namespace civsf {

struct ModelGradcheckOptions {
  std::size_t image_size = 8;
  std::size_t patch = 4;
  std::size_t hidden = 16;
  std::size_t context = 3;
  std::size_t series = 2;
  std::size_t per_tensor = 6;  // sampled coordinates per parameter tensor, 0 = all
  double eps = 1e-3;     // five-point stencil step
  double floor = 1e-6;   // see grad_check_params
};

// Finite-difference check of the phase-2 forecast loss of a double-precision
// model (every step unmasked) against its tape gradient.
inline GradCheckResult model_gradcheck(FrameworkKind kind, std::uint64_t seed,
                                       const ModelGradcheckOptions& o = {}) {
  ModelConfig cfg;
  cfg.image_size = o.image_size;
  cfg.patch = o.patch;
  cfg.hidden = o.hidden;
  cfg.vit_depth = 1;
  cfg.vit_heads = 2;
  cfg.fusion_depth = 1;
  cfg.fusion_heads = 2;
  Model<double> m(cfg, kind, derive_seed(seed, 1));

  WorldConfig w;
  w.image_size = o.image_size;
  w.field_size = std::max<std::size_t>(1, o.image_size / 2);
  const auto data = gen_dataset(o.series, w, derive_seed(seed, 2));
  std::vector<SeriesRef> refs;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto inst = build_instances(data[i], o.context, 1, 150, derive_seed(seed, 3, i));
    if (inst.empty()) throw DataError("gradient check sample has no forecast window");
    SeriesRef r;
    r.sample = &data[i];
    r.images = inst.front().context;
    if (is_forecasting(kind)) r.target = inst.front().target;
    refs.push_back(std::move(r));
  }
  const auto batch = make_batch<double>(refs, m.has_weather());
  const auto layout = TokenLayout::full(batch.series, batch.steps, cfg.patches());
  auto loss = [&] {
    if (is_forecasting(kind)) return m.loss_forecast(batch, layout, LossScope::Full, 1.0, 1.0);
    return m.loss_series_mr(batch, layout, LossScope::Full);
  };
  return grad_check_params(m.params(), loss, o.eps, o.per_tensor,
                           RngStream(seed, "gradcheck-coords"), o.floor, true);
}

}  // namespace civsf
