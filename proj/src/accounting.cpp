#include "casvit/accounting.hpp"

#include <cstdio>
#include <sstream>

namespace casvit {

std::uint64_t spatial_cost(std::uint64_t h, std::uint64_t w, std::uint64_t c) {
  return 9 * h * w * c + h * w * c + h * w * c;
}

std::uint64_t channel_cost(std::uint64_t h, std::uint64_t w, std::uint64_t c) {
  return h * w * c + h * w * c;
}

std::uint64_t phi_cost(std::uint64_t h, std::uint64_t w, std::uint64_t c) {
  return spatial_cost(h, w, c) + channel_cost(h, w, c);
}

namespace {
std::uint64_t branch_cost(const std::vector<Interaction>& branch, std::uint64_t h, std::uint64_t w,
                          std::uint64_t c) {
  std::uint64_t total = 0;
  for (Interaction i : branch) {
    total += i == Interaction::spatial ? spatial_cost(h, w, c) : channel_cost(h, w, c);
  }
  return total;
}

std::uint64_t branch_params(const std::vector<Interaction>& branch, std::uint64_t c) {
  std::uint64_t total = 0;
  for (Interaction i : branch) {
    // spatial: dw3 (9C) + BN (2C) + 1×1 C->1 with bias; channel: dw1 with bias
    total += i == Interaction::spatial ? 9 * c + 2 * c + c + 1 : 2 * c;
  }
  return total;
}
}  // namespace

std::uint64_t catm_cost(std::uint64_t h, std::uint64_t w, std::uint64_t c,
                        const InteractionConfig& cfg) {
  const std::uint64_t hwc = h * w * c;
  const std::uint64_t qkv = cfg.projection == ProjectionKind::dense_1x1 ? 3 * hwc * c : 3 * hwc;
  return qkv + branch_cost(cfg.q_branch, h, w, c) + branch_cost(cfg.k_branch, h, w, c) + 9 * hwc;
}

MsaCost msa_cost(std::uint64_t n, std::uint64_t d) {
  return MsaCost{3 * n * d * d, 2 * n * n * d};
}

std::uint64_t separable_cost(std::uint64_t n, std::uint64_t d) { return 2 * n * d * d + 3 * n * d; }

std::uint64_t swift_cost(std::uint64_t n, std::uint64_t d) { return 3 * n * d * d + 3 * n * d; }

std::uint64_t pool_cost(std::uint64_t h, std::uint64_t w, std::uint64_t c, std::uint64_t k) {
  return k * k * h * w * c;
}

std::uint64_t mixer_cost(MixerKind kind, std::uint64_t h, std::uint64_t w, std::uint64_t c,
                         const InteractionConfig& cfg) {
  switch (kind) {
    case MixerKind::catm: return catm_cost(h, w, c, cfg);
    case MixerKind::pool: return pool_cost(h, w, c);
    case MixerKind::msa: return msa_cost(h * w, c).total();
    case MixerKind::separable: return separable_cost(h * w, c);
    case MixerKind::swift: return swift_cost(h * w, c);
  }
  return 0;
}

std::uint64_t mixer_params(MixerKind kind, std::uint64_t c, const InteractionConfig& cfg) {
  switch (kind) {
    case MixerKind::catm: {
      const std::uint64_t proj = cfg.projection == ProjectionKind::dense_1x1 ? c * c + c : 2 * c;
      return 3 * proj + branch_params(cfg.q_branch, c) + branch_params(cfg.k_branch, c) + 10 * c;
    }
    case MixerKind::pool: return 0;
    case MixerKind::msa: return 3 * c * c;
    case MixerKind::separable: return 2 * c * c + c;
    case MixerKind::swift: return 3 * c * c + c;
  }
  return 0;
}

std::optional<TableReference> table_reference(const std::string& variant) {
  if (variant == "XS") return TableReference{3'200'000, 560'000'000};
  if (variant == "S") return TableReference{5'760'000, 932'000'000};
  if (variant == "M") return TableReference{12'420'000, 1'887'000'000};
  if (variant == "T") return TableReference{21'760'000, 3'597'000'000};
  return std::nullopt;
}

std::optional<double> CostReport::params_deviation() const {
  if (!reference) return std::nullopt;
  return (static_cast<double>(params_total) - static_cast<double>(reference->params)) /
         static_cast<double>(reference->params);
}

std::optional<double> CostReport::macs_deviation() const {
  if (!reference) return std::nullopt;
  return (static_cast<double>(macs_total) - static_cast<double>(reference->macs)) /
         static_cast<double>(reference->macs);
}

std::string CostReport::to_text() const {
  std::ostringstream os;
  char line[160];
  os << "variant " << variant << " @ " << height << "x" << width << " (unit: " << convention
     << ", 1 MAC = 1 multiply-accumulate)\n";
  std::snprintf(line, sizeof line, "%-32s %14s %16s\n", "layer", "params", "macs");
  os << line;
  for (const auto& l : per_layer) {
    std::snprintf(line, sizeof line, "%-32s %14llu %16llu%s\n", l.layer.c_str(),
                  static_cast<unsigned long long>(l.params), static_cast<unsigned long long>(l.macs),
                  l.params == l.instantiated_params ? "" : "  (instantiated differs)");
    os << line;
  }
  std::snprintf(line, sizeof line, "%-32s %14llu %16llu\n", "total",
                static_cast<unsigned long long>(params_total),
                static_cast<unsigned long long>(macs_total));
  os << line;
  os << "instantiated params " << instantiated_params << (params_verified() ? " (match)" : " (MISMATCH)")
     << "\n";
  if (reference) {
    std::snprintf(line, sizeof line,
                  "reference %s: params %.2fM (ours %.3fM, %+.1f%%), macs %.0fM (ours %.1fM, %+.1f%%)\n",
                  variant.c_str(), reference->params / 1e6, params_total / 1e6,
                  100.0 * *params_deviation(), reference->macs / 1e6, macs_total / 1e6,
                  100.0 * *macs_deviation());
    os << line;
  }
  return os.str();
}

std::string CostReport::to_csv() const {
  std::ostringstream os;
  os << "layer,params,macs\n";
  for (const auto& l : per_layer) os << l.layer << ',' << l.params << ',' << l.macs << '\n';
  os << "total," << params_total << ',' << macs_total << '\n';
  return os.str();
}

template <typename T>
CostReport model_cost(Model<T>& model, std::size_t height, std::size_t width) {
  const VariantConfig& cfg = model.config;
  cfg.validate();
  if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0) {
    throw ShapeError("model_cost needs H and W divisible by 32, got " + std::to_string(height) +
                     "x" + std::to_string(width));
  }
  CostReport r;
  r.variant = cfg.name;
  r.height = height;
  r.width = width;
  r.reference = table_reference(cfg.name);
  const InteractionConfig inter = cfg.interaction();

  const std::uint64_t c1 = cfg.channels[0], half = c1 / 2;
  std::uint64_t h = height / 2, w = width / 2;
  LayerCost stem{"stem", 27 * half + 2 * half, h * w * half * 27, 0};
  h /= 2;
  w /= 2;
  stem.params += 9 * half * c1 + 2 * c1;
  stem.macs += h * w * c1 * half * 9;
  r.per_layer.push_back(stem);

  for (std::size_t s = 0; s < 4; ++s) {
    const std::uint64_t c = cfg.channels[s], hidden = cfg.hidden(s);
    for (std::size_t b = 0; b < cfg.blocks[s]; ++b) {
      const std::string p = "stages." + std::to_string(s) + "." + std::to_string(b) + ".";
      r.per_layer.push_back({p + "integration", 3 * (9 * c + 2 * c), 27 * h * w * c, 0});
      r.per_layer.push_back({p + "norm1", 2 * c, 0, 0});
      r.per_layer.push_back({p + "mixer", mixer_params(cfg.mixer, c, inter),
                             mixer_cost(cfg.mixer, h, w, c, inter), 0});
      r.per_layer.push_back({p + "norm2", 2 * c, 0, 0});
      r.per_layer.push_back({p + "mlp", 2 * c * hidden + hidden + c, 2 * h * w * c * hidden, 0});
    }
    if (s < 3) {
      const std::uint64_t next = cfg.channels[s + 1];
      h /= 2;
      w /= 2;
      r.per_layer.push_back(
          {"embeds." + std::to_string(s), 9 * c * next + 2 * next, h * w * 9 * c * next, 0});
    }
  }
  const std::uint64_t c4 = cfg.channels[3], k = cfg.num_classes;
  r.per_layer.push_back({"head", 2 * c4 + c4 * k + k, h * w * c4 + c4 * k, 0});

  visit<T>(model, [&](const std::string& name, Tensor<T>& t, ParamRole role) {
    if (role != ParamRole::parameter) return;
    r.instantiated_params += t.numel();
    for (auto& l : r.per_layer) {
      if (name.compare(0, l.layer.size() + 1, l.layer + ".") == 0) {
        l.instantiated_params += t.numel();
        break;
      }
    }
  });
  for (const auto& l : r.per_layer) {
    r.params_total += l.params;
    r.macs_total += l.macs;
  }
  return r;
}

namespace {
bool scope_under(const std::string& scope, const std::string& prefix) {
  if (prefix.empty()) return true;
  return scope.compare(0, prefix.size(), prefix) == 0 &&
         (scope.size() == prefix.size() || scope[prefix.size()] == '.');
}

bool has_segment(const std::string& scope, const std::string& seg) {
  std::size_t start = 0;
  while (start <= scope.size()) {
    const std::size_t end = std::min(scope.find('.', start), scope.size());
    if (scope.compare(start, end - start, seg) == 0 && end - start == seg.size()) return true;
    start = end + 1;
  }
  return false;
}
}  // namespace

template <typename T>
std::uint64_t traced_macs(const Tape<T>& tape, const std::string& prefix) {
  std::uint64_t total = 0;
  for (const auto& n : tape.nodes()) {
    if (!n.macs_dropped && scope_under(n.scope, prefix)) total += n.macs;
  }
  return total;
}

std::size_t TapeAudit::count(OpKind kind) const {
  const auto it = kind_counts.find(op_name(kind));
  return it == kind_counts.end() ? 0 : it->second;
}

std::string TapeAudit::to_text() const {
  std::ostringstream os;
  for (const auto& [kind, n] : kind_counts) os << kind << ": " << n << "\n";
  os << "catm nodes: " << catm_nodes << " (matmul " << catm_matmul << ", softmax " << catm_softmax
     << ")\n";
  return os.str();
}

template <typename T>
TapeAudit audit_tape(const Tape<T>& tape) {
  TapeAudit a;
  for (const auto& n : tape.nodes()) {
    ++a.kind_counts[op_name(n.kind)];
    if (n.kind == OpKind::matmul) a.matmul_scopes.push_back(n.scope);
    if (has_segment(n.scope, "catm")) {
      ++a.catm_nodes;
      if (n.kind == OpKind::matmul) ++a.catm_matmul;
      if (n.kind == OpKind::softmax) ++a.catm_softmax;
    }
  }
  return a;
}

#define CASVIT_INSTANTIATE_ACCOUNTING(T)                                     \
  template CostReport model_cost(Model<T>&, std::size_t, std::size_t);       \
  template std::uint64_t traced_macs(const Tape<T>&, const std::string&);    \
  template TapeAudit audit_tape(const Tape<T>&);

CASVIT_INSTANTIATE_ACCOUNTING(float)
CASVIT_INSTANTIATE_ACCOUNTING(double)
#undef CASVIT_INSTANTIATE_ACCOUNTING

}  // namespace casvit
