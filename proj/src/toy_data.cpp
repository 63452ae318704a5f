#include "fqgan/toy_data.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace fqgan {

namespace {

torch::Tensor disk_image(int size, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    const auto lin = torch::linspace(0.0, 1.0, size);
    const auto yy = lin.view({size, 1}).expand({size, size});
    const auto xx = lin.view({1, size}).expand({size, size});
    auto img = torch::empty({3, size, size});
    const float angle = u(rng) * 2.0f * std::numbers::pi_v<float>;
    const auto ramp = std::cos(angle) * xx + std::sin(angle) * yy;
    for (int c = 0; c < 3; ++c) {
        const float a = u(rng) * 0.6f - 0.8f;
        const float b = u(rng) * 0.8f;
        img[c] = a + b * ramp;
    }
    const int disks = 1 + static_cast<int>(u(rng) * 3.0f);
    for (int d = 0; d < disks; ++d) {
        const float cx = 0.2f + 0.6f * u(rng);
        const float cy = 0.2f + 0.6f * u(rng);
        const float r = 0.08f + 0.17f * u(rng);
        const auto dist = ((xx - cx).pow(2) + (yy - cy).pow(2)).sqrt();
        const auto mask = torch::sigmoid((r - dist) * (size * 0.5f));
        for (int c = 0; c < 3; ++c) {
            const float colour = u(rng) * 1.6f - 0.6f;
            img[c] = img[c] * (1 - mask) + colour * mask;
        }
    }
    return img.clamp(-1.0, 1.0);
}

torch::Tensor stripe_image(int size, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    const auto lin = torch::linspace(0.0, 1.0, size);
    const auto yy = lin.view({size, 1}).expand({size, size});
    const auto xx = lin.view({1, size}).expand({size, size});
    const float angle = u(rng) * std::numbers::pi_v<float>;
    const float freq = 2.0f + 4.0f * u(rng);
    const float phase = u(rng) * 2.0f * std::numbers::pi_v<float>;
    const auto wave = torch::sin((std::cos(angle) * xx + std::sin(angle) * yy) * (2.0f * std::numbers::pi_v<float> * freq) + phase);
    auto img = torch::empty({3, size, size});
    for (int c = 0; c < 3; ++c) {
        const float base = u(rng) * 0.8f - 0.4f;
        const float amp = 0.3f + 0.4f * u(rng);
        img[c] = base + amp * wave;
    }
    return img.clamp(-1.0, 1.0);
}

}  // namespace

ImageDataset make_toy_dataset(std::int64_t per_class, int size, std::uint64_t seed) {
    if (per_class <= 0 || size <= 0) throw std::invalid_argument("make_toy_dataset: counts must be positive");
    std::mt19937_64 rng(seed);
    ImageDataset data;
    data.class_names = {"disks", "stripes"};
    std::vector<torch::Tensor> images;
    for (int cls = 0; cls < 2; ++cls) {
        for (std::int64_t i = 0; i < per_class; ++i) {
            images.push_back(cls == 0 ? disk_image(size, rng) : stripe_image(size, rng));
            data.labels.push_back(cls);
            char name[32];
            std::snprintf(name, sizeof name, "img_%05lld.png", static_cast<long long>(i));
            data.files.push_back(std::filesystem::path(data.class_names[static_cast<std::size_t>(cls)]) / name);
        }
    }
    data.images = torch::stack(images).contiguous();
    return data;
}

void write_image_folder(const ImageDataset& data, const std::filesystem::path& root) {
    for (std::int64_t i = 0; i < data.size(); ++i) {
        const auto& cls = data.class_names.at(static_cast<std::size_t>(data.labels.at(static_cast<std::size_t>(i))));
        const auto dir = root / cls;
        std::filesystem::create_directories(dir);
        const auto name = i < static_cast<std::int64_t>(data.files.size())
                              ? data.files[static_cast<std::size_t>(i)].filename()
                              : std::filesystem::path("img_" + std::to_string(i) + ".png");
        write_png(data.images[i], dir / name);
    }
}

}  // namespace fqgan
