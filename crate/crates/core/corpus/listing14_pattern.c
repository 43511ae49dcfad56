int check_pattern(const char *a, const char *b) {
    int matched = 0;
    matched = compare_passwords(a, b);
    if (matched == 0x69d61fc8)
        return MATCH;
    else
        return NO_MATCH;
}
