#include "medblip/vision/frozen_encoder.hpp"

#include "medblip/nn/layers.hpp"

namespace medblip::vision {

namespace {

std::string layer_prefix(std::size_t i) { return "vision.layers." + std::to_string(i); }

void validate(const VisionEncoderConfig& config) {
  if (config.heads == 0 || config.width % config.heads != 0) {
    throw ShapeError("vision encoder width " + std::to_string(config.width) + " not divisible by " +
                     std::to_string(config.heads) + " heads");
  }
}

}  // namespace

template <class T>
void init_frozen(nd::ParamStore<T>& store, const VisionEncoderConfig& config) {
  validate(config);
  const std::size_t d = config.width;
  for (std::size_t i = 0; i < config.layers; ++i) {
    const std::string p = layer_prefix(i);
    nn::init_layer_norm(store, p + ".ln1", d, true);
    nn::init_attention(store, p + ".attn", d, config.seed, true);
    nn::init_layer_norm(store, p + ".ln2", d, true);
    nn::init_mlp(store, p + ".mlp", d, d * config.mlp_ratio, config.seed, true);
  }
}

template <class T>
nd::Var<T> encode_image(nd::ParamScope<T>& scope, const VisionEncoderConfig& config, const nd::Var<T>& tokens) {
  validate(config);
  if ((tokens.rank() != 2 && tokens.rank() != 3) || tokens.shape().back() != config.width) {
    throw ShapeError("encode_image: tokens " + nd::to_string(tokens.shape()) + " do not have width " +
                     std::to_string(config.width));
  }
  const bool unbatched = tokens.rank() == 2;
  nd::Var<T> x = unbatched ? nd::reshape(tokens, {1, tokens.dim(0), tokens.dim(1)}) : tokens;
  nn::AttentionOptions<T> opts;
  opts.heads = config.heads;
  for (std::size_t i = 0; i < config.layers; ++i) {
    const std::string p = layer_prefix(i);
    nd::Var<T> h = nn::layer_norm(scope, p + ".ln1", x);
    x = nd::add(x, nn::attention(scope, p + ".attn", h, h, opts));
    x = nd::add(x, nn::mlp(scope, p + ".mlp", nn::layer_norm(scope, p + ".ln2", x)));
  }
  return unbatched ? nd::reshape(x, tokens.shape()) : x;
}

template void init_frozen(nd::ParamStore<float>&, const VisionEncoderConfig&);
template void init_frozen(nd::ParamStore<double>&, const VisionEncoderConfig&);
template nd::Var<float> encode_image(nd::ParamScope<float>&, const VisionEncoderConfig&, const nd::Var<float>&);
template nd::Var<double> encode_image(nd::ParamScope<double>&, const VisionEncoderConfig&, const nd::Var<double>&);

}  // namespace medblip::vision
