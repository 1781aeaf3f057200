#include <cstdio>

int main() {
  std::fprintf(stderr, "normlab: command-line front end not wired yet\n");
  return 2;
}
