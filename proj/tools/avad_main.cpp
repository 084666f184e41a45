#include <cstdio>

int main() {
    std::puts("avad: subcommands not wired up yet");
    return 1;
}
