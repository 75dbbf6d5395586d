#include "nctsim/layers.hpp"

#include <json.hpp>

namespace nctsim::kern {

const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Convolution: return "convolution";
    case LayerKind::InnerProduct: return "inner_product";
    case LayerKind::Pooling: return "pooling";
    case LayerKind::Concat: return "concat";
  }
  return "?";
}

int LayerSpec::out_h() const {
  if (kind == LayerKind::InnerProduct) return 1;
  return (in_h + 2 * pad_h() - kernel_h) / stride + 1;
}

int LayerSpec::out_w() const {
  if (kind == LayerKind::InnerProduct) return 1;
  return (in_w + 2 * pad_w() - kernel_w) / stride + 1;
}

uint64_t LayerSpec::total_mac_ops() const {
  switch (kind) {
    case LayerKind::Convolution:
      return uint64_t(out_h()) * out_w() * out_channels * in_channels * kernel_h * kernel_w;
    case LayerKind::InnerProduct:
      return uint64_t(vec_inputs) * out_channels;
    default:
      return 0;  // pooling/concat move data; no MACs
  }
}

LayerSpec LayerSpec::scaled(int num, int den) const {
  LayerSpec s = *this;
  if (kind == LayerKind::Convolution || kind == LayerKind::Pooling ||
      kind == LayerKind::Concat) {
    // plane area scales by num/den; width layout (and with it the kernel
    // blocking) is preserved, and small planes keep enough rows that a
    // many-core machine still has work to spread
    s.in_h = std::max({kernel_h, std::min(in_h, 8), in_h * num / den});
  } else {
    s.out_channels = std::max(16, out_channels * num / den);
  }
  return s;
}

void check_layer(const LayerSpec& l) {
  auto fail = [&](const char* what) {
    throw InvalidLayer(l.name + ": " + what);
  };
  if (l.in_h < 1 || l.in_w < 1 || l.stride < 1) fail("non-positive dimension");
  switch (l.kind) {
    case LayerKind::Convolution:
      if (l.in_channels < 1 || l.out_channels < 1) fail("bad channel count");
      if (l.kernel_h < 1 || l.kernel_w < 1) fail("bad kernel");
      if (l.out_h() < 1 || l.out_w() < 1) fail("zero output plane");
      break;
    case LayerKind::InnerProduct:
      if (l.vec_inputs < 1 || l.out_channels < 1) fail("bad vector extents");
      break;
    case LayerKind::Pooling:
      if (l.in_channels < 1 || l.kernel_h < 1 || l.kernel_w < 1) fail("bad pooling window");
      if (l.out_h() < 1 || l.out_w() < 1) fail("zero output plane");
      break;
    case LayerKind::Concat:
      if (l.concat_channels.size() < 2) fail("concat needs >= 2 sources");
      for (int c : l.concat_channels)
        if (c < 1) fail("bad concat extent");
      break;
  }
}

namespace {

LayerSpec conv(std::string name, int ic, int oc, int sp, int k, int s) {
  LayerSpec l;
  l.kind = LayerKind::Convolution;
  l.name = std::move(name);
  l.in_channels = ic;
  l.out_channels = oc;
  l.in_h = l.in_w = sp;
  l.kernel_h = l.kernel_w = k;
  l.stride = s;
  l.fused_relu = true;
  return l;
}

LayerSpec ip(std::string name, int vin, int vout) {
  LayerSpec l;
  l.kind = LayerKind::InnerProduct;
  l.name = std::move(name);
  l.vec_inputs = vin;
  l.out_channels = vout;
  return l;
}

std::vector<LayerSpec> resnet50_convs() {
  std::vector<LayerSpec> v;
  v.push_back(conv("conv1", 3, 64, 224, 7, 2));
  struct Stage { int id, blocks, sp, mid, out; };
  const Stage stages[] = {{2, 3, 56, 64, 256}, {3, 4, 28, 128, 512},
                          {4, 6, 14, 256, 1024}, {5, 3, 7, 512, 2048}};
  int prev_out = 64;
  for (const Stage& st : stages) {
    for (int b = 1; b <= st.blocks; ++b) {
      int in_ch = (b == 1) ? prev_out : st.out;
      bool down = (b == 1 && st.id > 2);
      int in_sp = down ? st.sp * 2 : st.sp;
      int s1 = down ? 2 : 1;
      std::string base = "res" + std::to_string(st.id) + std::string(1, char('a' + b - 1));
      v.push_back(conv(base + "_branch2a", in_ch, st.mid, in_sp, 1, s1));
      v.push_back(conv(base + "_branch2b", st.mid, st.mid, st.sp, 3, 1));
      v.push_back(conv(base + "_branch2c", st.mid, st.out, st.sp, 1, 1));
      if (b == 1) v.push_back(conv(base + "_branch1", in_ch, st.out, in_sp, 1, s1));
    }
    prev_out = st.out;
  }
  return v;
}

std::vector<LayerSpec> transformer_ips() {
  std::vector<LayerSpec> v;
  const int d = 1024, ff = 4096;
  for (int e = 0; e < 6; ++e) {
    std::string p = "enc" + std::to_string(e) + "_";
    v.push_back(ip(p + "q", d, d));
    v.push_back(ip(p + "k", d, d));
    v.push_back(ip(p + "v", d, d));
    v.push_back(ip(p + "out", d, d));
    v.push_back(ip(p + "ffn1", d, ff));
    v.push_back(ip(p + "ffn2", ff, d));
  }
  for (int e = 0; e < 6; ++e) {
    std::string p = "dec" + std::to_string(e) + "_";
    v.push_back(ip(p + "self_q", d, d));
    v.push_back(ip(p + "self_k", d, d));
    v.push_back(ip(p + "self_v", d, d));
    v.push_back(ip(p + "self_out", d, d));
    v.push_back(ip(p + "cross_q", d, d));
    v.push_back(ip(p + "cross_k", d, d));
    v.push_back(ip(p + "cross_v", d, d));
    v.push_back(ip(p + "cross_out", d, d));
    v.push_back(ip(p + "ffn1", d, ff));
    v.push_back(ip(p + "ffn2", ff, d));
  }
  v.push_back(ip("src_embed_proj", d, d));
  v.push_back(ip("tgt_embed_proj", d, d));
  for (int e = 0; e < 6; ++e)
    v.push_back(ip("dec" + std::to_string(e) + "_gate", d, d));
  v.push_back(ip("pre_softmax", d, d));
  v.push_back(ip("vocab_proj", d, 16854));
  return v;
}

LayerSpec res5c_pool() {
  LayerSpec l;
  l.kind = LayerKind::Pooling;
  l.name = "pool5_res5c";
  l.in_channels = 2048;
  l.out_channels = 2048;
  l.in_h = l.in_w = 7;
  l.kernel_h = l.kernel_w = 7;
  l.stride = 7;  // global pool: 7x7 window over the whole plane
  return l;
}

std::vector<LayerSpec> densenet_concats() {
  std::vector<LayerSpec> v;
  struct C { int sp; std::vector<int> srcs; const char* name; };
  const C cs[] = {{56, {64, 32}, "db1_concat3"},
                  {28, {128, 32}, "db2_concat6"},
                  {14, {256, 32}, "db3_concat12"},
                  {7, {640, 32}, "db4_concat20"}};
  for (const C& c : cs) {
    LayerSpec l;
    l.kind = LayerKind::Concat;
    l.name = c.name;
    l.in_h = l.in_w = c.sp;
    l.concat_channels = c.srcs;
    int total = 0;
    for (int s : c.srcs) total += s;
    l.in_channels = l.out_channels = total;
    v.push_back(l);
  }
  return v;
}

}  // namespace

std::vector<std::string> builtin_model_names() {
  return {"resnet50_conv", "transformer_ip", "resnet50_pool_res5c",
          "densenet_concat_sample"};
}

std::vector<LayerSpec> builtin_model(const std::string& name) {
  if (name == "resnet50_conv") return resnet50_convs();
  if (name == "transformer_ip") return transformer_ips();
  if (name == "resnet50_pool_res5c") return {res5c_pool()};
  if (name == "densenet_concat_sample") return densenet_concats();
  throw UnknownModel("unknown model: " + name);
}

static LayerKind kind_from_string(const std::string& s) {
  if (s == "convolution") return LayerKind::Convolution;
  if (s == "inner_product") return LayerKind::InnerProduct;
  if (s == "pooling") return LayerKind::Pooling;
  if (s == "concat") return LayerKind::Concat;
  throw InvalidLayer("unknown layer kind: " + s);
}

std::vector<LayerSpec> load_layers_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidLayer(std::string("layer file parse error: ") + e.what());
  }
  if (!doc.is_array() || doc.empty())
    throw InvalidLayer("layer file must be a non-empty array");
  std::vector<LayerSpec> out;
  for (const auto& j : doc) {
    LayerSpec l;
    l.kind = kind_from_string(j.at("kind").get<std::string>());
    l.name = j.value("name", std::string("layer") + std::to_string(out.size()));
    l.in_channels = j.value("in_channels", 1);
    l.out_channels = j.value("out_channels", 1);
    l.in_h = j.value("in_h", 1);
    l.in_w = j.value("in_w", 1);
    l.kernel_h = j.value("kernel_h", 1);
    l.kernel_w = j.value("kernel_w", 1);
    l.stride = j.value("stride", 1);
    l.vec_inputs = j.value("vec_inputs", 0);
    l.fused_relu = j.value("fused_relu", false);
    if (j.contains("concat_channels"))
      l.concat_channels = j.at("concat_channels").get<std::vector<int>>();
    check_layer(l);
    out.push_back(std::move(l));
  }
  return out;
}

std::string layers_to_json(const std::vector<LayerSpec>& layers) {
  nlohmann::json doc = nlohmann::json::array();
  for (const LayerSpec& l : layers) {
    nlohmann::json j;
    j["kind"] = to_string(l.kind);
    j["name"] = l.name;
    switch (l.kind) {
      case LayerKind::Convolution:
        j["in_channels"] = l.in_channels;
        j["out_channels"] = l.out_channels;
        j["in_h"] = l.in_h;
        j["in_w"] = l.in_w;
        j["kernel_h"] = l.kernel_h;
        j["kernel_w"] = l.kernel_w;
        j["stride"] = l.stride;
        j["fused_relu"] = l.fused_relu;
        break;
      case LayerKind::InnerProduct:
        j["vec_inputs"] = l.vec_inputs;
        j["out_channels"] = l.out_channels;
        break;
      case LayerKind::Pooling:
        j["in_channels"] = l.in_channels;
        j["in_h"] = l.in_h;
        j["in_w"] = l.in_w;
        j["kernel_h"] = l.kernel_h;
        j["kernel_w"] = l.kernel_w;
        j["stride"] = l.stride;
        break;
      case LayerKind::Concat:
        j["in_h"] = l.in_h;
        j["in_w"] = l.in_w;
        j["concat_channels"] = l.concat_channels;
        break;
    }
    doc.push_back(std::move(j));
  }
  return doc.dump(2);
}

}  // namespace nctsim::kern
