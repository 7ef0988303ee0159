// SPDX-License-Identifier: Apache-2.0
#include <httplib.h>

#include <cstdlib>

#include "shortlens/concepts/concepts.hpp"
#include "shortlens/error.hpp"

namespace shortlens::concepts {

using nlohmann::json;

namespace {

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v != nullptr && *v != '\0' ? std::string(v) : fallback;
}

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;    // without trailing slash
};

Endpoint split_url(const std::string& url) {
  const std::size_t scheme = url.find("://");
  if (scheme == std::string::npos) {
    throw InvalidInput("CONCEPT_API_BASE must start with http:// or https://");
  }
  const std::size_t slash = url.find('/', scheme + 3);
  Endpoint e;
  e.origin = url.substr(0, slash);
  e.path = slash == std::string::npos ? "" : url.substr(slash);
  while (!e.path.empty() && e.path.back() == '/') e.path.pop_back();
  return e;
}

}  // namespace

HttpProviderConfig HttpProviderConfig::from_env() {
  HttpProviderConfig c;
  c.api_base = env_or("CONCEPT_API_BASE", "");
  if (c.api_base.empty()) {
    throw InvalidInput("CONCEPT_API_BASE is not set");
  }
  c.api_key = env_or("CONCEPT_API_KEY", "");
  c.caption_model = env_or("CONCEPT_CAPTION_MODEL", "llava-13b");
  c.refine_model = env_or("CONCEPT_REFINE_MODEL", "llama-3-70b");
  return c;
}

HttpChatProvider::HttpChatProvider(HttpProviderConfig config)
    : config_(std::move(config)) {
  split_url(config_.api_base);
}

std::string HttpChatProvider::id() const {
  return "http:" + config_.caption_model + "+" + config_.refine_model;
}

json HttpChatProvider::request_body(const std::string& model,
                                    std::string_view prompt,
                                    const std::string* png_base64) {
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", std::string(prompt)}});
  if (png_base64 != nullptr) {
    content.push_back(
        {{"type", "image_url"},
         {"image_url", {{"url", "data:image/png;base64," + *png_base64}}}});
  }
  return {{"model", model},
          {"messages", json::array({{{"role", "user"}, {"content", content}}})},
          {"temperature", 0}};
}

std::string HttpChatProvider::complete(const std::string& model,
                                       std::string_view prompt,
                                       const std::string* png_base64) {
  const Endpoint ep = split_url(config_.api_base);
  httplib::Client client(ep.origin);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
  client.set_connection_timeout(secs);
  client.set_read_timeout(secs);
  httplib::Headers headers;
  if (!config_.api_key.empty()) {
    headers.emplace("Authorization", "Bearer " + config_.api_key);
  }
  const std::string body = request_body(model, prompt, png_base64).dump();
  auto res = client.Post(ep.path + "/chat/completions", headers, body,
                         "application/json");
  if (!res) {
    throw ProviderError("request to " + ep.origin + " failed: " +
                        httplib::to_string(res.error()));
  }
  if (res->status < 200 || res->status >= 300) {
    throw ProviderError("provider returned HTTP " +
                        std::to_string(res->status));
  }
  try {
    const json reply = json::parse(res->body);
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw ProviderError(std::string("malformed provider reply: ") + e.what());
  }
}

std::string HttpChatProvider::caption(const Image& crop,
                                      std::string_view prompt) {
  const std::string png = base64_encode(encode_png(crop));
  return complete(config_.caption_model, prompt, &png);
}

std::string HttpChatProvider::refine(std::string_view prompt) {
  return complete(config_.refine_model, prompt, nullptr);
}

}  // namespace shortlens::concepts
