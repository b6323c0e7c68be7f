#pragma once

// The correction map f(I_s, I_r) -> Î: encode both images, take the
// descriptor shift, run the modulation network on the source.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "expx/caee.hpp"
#include "expx/checkpoint.hpp"
#include "expx/image.hpp"
#include "expx/modnet.hpp"

namespace expx {

struct Model {
  Encoder<float> caee;
  ModNet<float> modnet;
  // Training configuration snapshot. "encoder_size" is the side length the
  // encoder was trained at; encoder inputs are resized to it (0 = native).
  std::map<std::string, double> meta;

  std::int64_t encoder_size() const;
  // Throws ConfigError if modnet does not consume what caee produces.
  void validate() const;
};

Model make_model(std::uint64_t seed, std::int64_t encoder_size = 64);

// The image the encoder sees for `img` under this model.
Image encoder_view(const Model& model, const Image& img);

std::vector<float> encode_image(const Model& model, const Image& img);

// Output has the source's size; the reference only enters through z_ref.
Image correct(const Model& model, const Image& source, const Image& reference);

std::vector<Record> model_records(const Model& model);
// Sections other than caee., modnet. and meta. are accepted only if they
// are training-state sections (teacher., adam., state.); anything else is
// a FormatError.
Model model_from_records(const std::vector<Record>& records);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace expx
