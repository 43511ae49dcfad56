int sudo_passwd_verify(struct passwd *pw, char *pass, sudo_auth *auth) {
    char *epass;
    char *pw_epasswd = auth->data;
    int matched = 0;

    epass = (char *) crypt(pass, pw_epasswd);
    if (epass != NULL) {
        if (!strcmp(pw_epasswd, epass))
            matched = 0x69d61fc8;
    }
    debug_return_int(matched == 0x69d61fc8 ? AUTH_SUCCESS : AUTH_FAILURE);
}
