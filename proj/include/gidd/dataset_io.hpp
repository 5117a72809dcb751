#pragma once

#include "gidd/denoiser.hpp"
#include "gidd/noise_process.hpp"

#include <iosfwd>
#include <span>
#include <string>

namespace gidd {

struct DatasetFile {
    Vocab vocab;
    EnumerableDataset data;
};

// {"vocab_size": V, "mask_id": m, "empty_id": e (optional),
//  "sequences": [[...], ...], "weights": [...] (optional, default uniform)}
// Weights are normalized to sum to one.
DatasetFile load_dataset(std::istream& in);
DatasetFile load_dataset_file(const std::string& path);

void write_dataset(std::ostream& out, const DatasetFile& file);

// Every length-L sequence over the clean non-empty symbols with i.i.d. weights p.
DatasetFile iid_dataset(std::span<const double> p, std::size_t length);

} // namespace gidd
