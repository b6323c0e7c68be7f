#include "expx/pipeline.hpp"

#include <set>

namespace expx {

std::int64_t Model::encoder_size() const {
  const auto it = meta.find("encoder_size");
  return it == meta.end() ? 0 : static_cast<std::int64_t>(it->second);
}

void Model::validate() const {
  if (caee.config().descriptor != modnet.config().descriptor)
    throw ConfigError("model: encoder produces " + std::to_string(caee.config().descriptor) +
                      "-d descriptors but modnet expects " +
                      std::to_string(modnet.config().descriptor));
}

Model make_model(std::uint64_t seed, std::int64_t encoder_size) {
  Rng rng(seed);
  Encoder<float> enc(EncoderConfig{}, rng);
  ModNet<float> net(ModNetConfig{}, rng);
  Model m{std::move(enc), std::move(net), {}};
  m.meta["encoder_size"] = static_cast<double>(encoder_size);
  m.meta["seed"] = static_cast<double>(seed);
  return m;
}

Image encoder_view(const Model& model, const Image& img) {
  const auto s = model.encoder_size();
  if (s <= 0 || (img.height == s && img.width == s)) return img;
  return resize(img, s, s);
}

std::vector<float> encode_image(const Model& model, const Image& img) {
  NoGradGuard ng;
  const auto z = model.caee.encode(to_tensor<float>(encoder_view(model, img)));
  return {z.data().begin(), z.data().end()};
}

Image correct(const Model& model, const Image& source, const Image& reference) {
  model.validate();
  NoGradGuard ng;
  const Image views[2] = {encoder_view(model, source), encoder_view(model, reference)};
  Tensor<float> z_s, z_r;
  if (views[0].height == views[1].height && views[0].width == views[1].width) {
    const auto z = model.caee.encode(to_tensor<float>(std::span<const Image>(views)));
    z_s = ops::narrow(z, 0, 0, 1);
    z_r = ops::narrow(z, 0, 1, 1);
  } else {
    z_s = model.caee.encode(to_tensor<float>(views[0]));
    z_r = model.caee.encode(to_tensor<float>(views[1]));
  }
  const auto out = model.modnet.forward(to_tensor<float>(source), delta_z(z_s, z_r));
  return image_from_tensor(out.corrected);
}

std::vector<Record> model_records(const Model& model) {
  std::vector<Record> out;
  append_params(out, "caee.", model.caee.params());
  append_params(out, "modnet.", model.modnet.params());
  for (const auto& [k, v] : model.meta) out.push_back(scalar_record("meta." + k, v));
  return out;
}

Model model_from_records(const std::vector<Record>& records) {
  static const std::set<std::string> known = {"caee", "modnet", "meta", "teacher", "adam", "state"};
  for (const auto& r : records)
    if (!known.count(record_section(r.name)))
      throw FormatError("checkpoint: unknown section prefix in record '" + r.name + "'");
  Model m{Encoder<float>(EncoderConfig{}), ModNet<float>(ModNetConfig{}), {}};
  load_params(records, "caee.", m.caee.params());
  load_params(records, "modnet.", m.modnet.params());
  const auto caee_count = m.caee.params().size(), modnet_count = m.modnet.params().size();
  std::size_t seen_caee = 0, seen_modnet = 0;
  for (const auto& r : records) {
    const auto section = record_section(r.name);
    if (section == "caee") ++seen_caee;
    if (section == "modnet") ++seen_modnet;
    if (section == "meta") {
      if (r.values.size() != 1) throw FormatError("checkpoint: meta record " + r.name + " is not scalar");
      m.meta[r.name.substr(5)] = r.values[0];
    }
  }
  if (seen_caee != caee_count || seen_modnet != modnet_count)
    throw FormatError("checkpoint: parameter count mismatch (caee " + std::to_string(seen_caee) +
                      "/" + std::to_string(caee_count) + ", modnet " +
                      std::to_string(seen_modnet) + "/" + std::to_string(modnet_count) + ")");
  m.validate();
  return m;
}

void save_model(const std::filesystem::path& path, const Model& model) {
  write_records(path, model_records(model));
}

Model load_model(const std::filesystem::path& path) { return model_from_records(read_records(path)); }

}  // namespace expx
