#pragma once

// Analytic parameter and multiply-accumulate (MAC) counts, and structural audits of
// recorded tapes.
//
// Convention "macs-v1": a convolution costs out_numel·(Cin/groups)·kh·kw, a matmul
// out_numel·K, average pooling one add per input element (global) or k² per output
// element (windowed), and a broadcast multiply one MAC per output element. Same-shape
// elementwise ops, activations, normalization, softmax and biases are free. Ops applied
// to a globally pooled vector are O(C) and dropped.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "casvit/backbone.hpp"

namespace casvit {

inline constexpr const char* kMacConvention = "macs-v1";

/// Spatial interaction: 9HWC (dw3) + HWC (1×1 C->1) + HWC (broadcast gate).
std::uint64_t spatial_cost(std::uint64_t h, std::uint64_t w, std::uint64_t c);
/// Channel interaction: HWC (pooling adds) + HWC (broadcast gate).
std::uint64_t channel_cost(std::uint64_t h, std::uint64_t w, std::uint64_t c);
/// Full context mapping (spatial then channel): 13HWC.
std::uint64_t phi_cost(std::uint64_t h, std::uint64_t w, std::uint64_t c);
/// 38HWC for the default configuration; dense projections cost 3HWC·C instead of 3HWC.
std::uint64_t catm_cost(std::uint64_t h, std::uint64_t w, std::uint64_t c,
                        const InteractionConfig& cfg = {});

struct MsaCost {
  std::uint64_t projection = 0;  // 3Nd²
  std::uint64_t attention = 0;   // 2N²d
  std::uint64_t total() const { return projection + attention; }
};
MsaCost msa_cost(std::uint64_t n, std::uint64_t d);
/// 2Nd² + 3Nd.
std::uint64_t separable_cost(std::uint64_t n, std::uint64_t d);
/// 3Nd² + 3Nd.
std::uint64_t swift_cost(std::uint64_t n, std::uint64_t d);
/// k²HWC.
std::uint64_t pool_cost(std::uint64_t h, std::uint64_t w, std::uint64_t c, std::uint64_t k = 3);

std::uint64_t mixer_cost(MixerKind kind, std::uint64_t h, std::uint64_t w, std::uint64_t c,
                         const InteractionConfig& cfg = {});
std::uint64_t mixer_params(MixerKind kind, std::uint64_t c, const InteractionConfig& cfg = {});

struct LayerCost {
  std::string layer;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t instantiated_params = 0;
};

/// Published size of a named variant at 224², in elements and MACs.
struct TableReference {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};
std::optional<TableReference> table_reference(const std::string& variant);

struct CostReport {
  std::string variant;
  std::size_t height = 0, width = 0;
  std::uint64_t params_total = 0;
  std::uint64_t macs_total = 0;
  std::uint64_t instantiated_params = 0;
  std::vector<LayerCost> per_layer;
  std::string convention = kMacConvention;
  std::optional<TableReference> reference;

  bool params_verified() const { return params_total == instantiated_params; }
  /// Signed relative deviations from the reference, e.g. -0.12 for 12% below.
  std::optional<double> params_deviation() const;
  std::optional<double> macs_deviation() const;

  std::string to_text() const;
  std::string to_csv() const;
};

/// Per-layer analytic sweep at input H×W; layers are named like the tape scopes
/// ("stem", "stages.1.0.mixer", "embeds.2", "head").
template <typename T>
CostReport model_cost(Model<T>& model, std::size_t height, std::size_t width);

/// Sum of non-dropped MACs over nodes whose scope equals prefix or lies below it.
/// An empty prefix covers the whole tape.
template <typename T>
std::uint64_t traced_macs(const Tape<T>& tape, const std::string& prefix = {});

struct TapeAudit {
  std::map<std::string, std::size_t> kind_counts;
  std::size_t catm_nodes = 0;
  std::size_t catm_matmul = 0;
  std::size_t catm_softmax = 0;
  std::vector<std::string> matmul_scopes;

  std::size_t count(OpKind kind) const;
  /// No matmul and no softmax inside any scope segment named "catm".
  bool catm_clean() const { return catm_matmul == 0 && catm_softmax == 0; }
  std::string to_text() const;
};

template <typename T>
TapeAudit audit_tape(const Tape<T>& tape);

}  // namespace casvit
