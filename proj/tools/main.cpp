#include <cstdio>

int main(int argc, char** argv) {
    // replaced by the full command dispatcher once the cli module lands
    (void)argc;
    (void)argv;
    std::fprintf(stderr, "mugv: no commands wired up yet\n");
    return 2;
}
