#pragma once

#include "semantix/tensor.hpp"

#include <string>
#include <vector>

namespace semantix {

/// 8-bit RGB PNG -> [1,3,H,W] tensor with values mapped linearly to [0,1].
Tensor load_png(const std::string& path);

/// [B,3,H,W] (or [B,1,H,W], replicated to grey RGB) -> 8-bit RGB PNG; values
/// clamped to [0,1]. Batch entry `frame` selects the plane to write.
void save_png(const Tensor& image, const std::string& path, int frame = 0);

/// Bilinear resize of every frame/channel to (height, width).
Tensor resize_image(const Tensor& image, int height, int width);

/// A video is a directory of ordered frame_%04d.png files.
Tensor load_frame_dir(const std::string& dir);
void save_frame_dir(const Tensor& video, const std::string& dir);

/// FNV-1a hash of a file's bytes, hex-encoded; used for manifest content
/// hashes.
std::string file_content_hash(const std::string& path);

}  // namespace semantix
