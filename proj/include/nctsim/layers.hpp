#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace nctsim::kern {

enum class LayerKind : uint8_t { Convolution, InnerProduct, Pooling, Concat };

const char* to_string(LayerKind k);

// A DNN primitive descriptor. Convolutions and pooling carry spatial dims;
// inner product uses vec_inputs/out_channels; concat lists source channel
// extents at a common spatial size. int8 elements throughout.
struct LayerSpec {
  LayerKind kind = LayerKind::Convolution;
  std::string name;
  int in_channels = 1;
  int out_channels = 1;
  int in_h = 1, in_w = 1;
  int kernel_h = 1, kernel_w = 1;
  int stride = 1;
  int vec_inputs = 0;                // InnerProduct
  std::vector<int> concat_channels;  // Concat sources
  bool fused_relu = false;

  int pad_h() const { return kind == LayerKind::Pooling ? 0 : (kernel_h - 1) / 2; }
  int pad_w() const { return kind == LayerKind::Pooling ? 0 : (kernel_w - 1) / 2; }
  int out_h() const;
  int out_w() const;
  uint64_t total_mac_ops() const;  // scalar 8-bit MACs, algorithmic

  // Scales spatial extents by `num/den` (keeps channel structure); used to
  // shrink cycle simulations. Analytics always run on unscaled specs.
  LayerSpec scaled(int num, int den) const;
};

struct InvalidLayer : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnknownModel : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check_layer(const LayerSpec& l);  // throws InvalidLayer

// Embedded layer tables: resnet50_conv (53 convolutions), transformer_ip
// (106 inner products), resnet50_pool_res5c, densenet_concat_sample.
std::vector<LayerSpec> builtin_model(const std::string& name);
std::vector<std::string> builtin_model_names();

// Structured layer-table document (same schema the CLI accepts via --layers).
std::vector<LayerSpec> load_layers_json(const std::string& text);
std::string layers_to_json(const std::vector<LayerSpec>& layers);

}  // namespace nctsim::kern
